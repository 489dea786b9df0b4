//! Preference scoring: a contrastive text-motion joint embedder (the
//! learned ranker), the analytic judge as a drop-in alternative, and the
//! ranking of candidate sets into winner-to-loser order.
//!
//! Both rankers sit behind [`Scorer`], so every downstream consumer (pair
//! selection, online alignment, evaluation protocols) runs through one code
//! path regardless of which judge produced the scores.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::domain::{
    render_tokens, MotionDataset, MotionSequence, NormStats, PromptSpec, TokenSeq, FEATURE_COUNT,
};
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_mlp, mlp_forward_plain, mlp_forward_tape, ParamSet, TapeBinding};
use crate::opt::{FreezeMask, Optimizer, OptimizerKind};
use crate::seeding::{derive_seed, derived_rng, rng_from_seed};

/// Structural description of the joint embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderStructure {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub motion_hidden: usize,
    pub vocab: usize,
    pub frames: usize,
    pub fps: u32,
}

impl EmbedderStructure {
    pub fn motion_input_dim(&self) -> usize {
        self.frames * FEATURE_COUNT
    }
}

/// Two-branch embedder mapping texts and motions into one unit sphere.
#[derive(Debug, Clone)]
pub struct JointEmbedder {
    pub params: ParamSet,
    pub structure: EmbedderStructure,
    /// Normalization applied to raw motions before the motion branch.
    pub norm_stats: NormStats,
}

pub fn init_embedder(structure: EmbedderStructure, norm_stats: NormStats, seed: u64) -> JointEmbedder {
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    init_linear(&mut params, "text.embed", structure.vocab, structure.token_dim, &mut rng);
    let mut cleaned = ParamSet::new();
    for (name, v) in params.iter() {
        if name != "text.embed.b" {
            cleaned.insert(name, v.clone());
        }
    }
    let mut params = cleaned;
    init_mlp(
        &mut params,
        "text.mlp",
        &[structure.token_dim, structure.text_hidden, structure.embed_dim],
        &mut rng,
    );
    init_mlp(
        &mut params,
        "motion.mlp",
        &[
            structure.motion_input_dim(),
            structure.motion_hidden,
            structure.embed_dim,
        ],
        &mut rng,
    );
    JointEmbedder {
        params,
        structure,
        norm_stats,
    }
}

fn normalize_rows_plain(mut x: Array2<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    x
}

impl JointEmbedder {
    fn pool_tokens_plain(&self, ids: &[Vec<usize>]) -> Array2<f64> {
        let table = self.params.get("text.embed.w");
        let d = self.structure.token_dim;
        let mut out = Array2::<f64>::zeros((ids.len(), d));
        for (i, list) in ids.iter().enumerate() {
            for &id in list {
                for j in 0..d {
                    out[[i, j]] += table[[id, j]];
                }
            }
            let inv = 1.0 / list.len() as f64;
            for j in 0..d {
                out[[i, j]] *= inv;
            }
        }
        out
    }

    /// Unit-norm text embeddings for a batch of token sequences.
    pub fn embed_texts(&self, tokens: &[&TokenSeq]) -> Result<Array2<f64>> {
        for t in tokens {
            t.validate()?;
        }
        let ids: Vec<Vec<usize>> = tokens
            .iter()
            .map(|t| t.tokens.iter().map(|&x| x as usize).collect())
            .collect();
        let pooled = self.pool_tokens_plain(&ids);
        let out = mlp_forward_plain(&self.params, "text.mlp", 2, &pooled);
        Ok(normalize_rows_plain(out))
    }

    /// Unit-norm motion embeddings for a batch of raw-unit motions.
    pub fn embed_motions(&self, motions: &[&MotionSequence]) -> Result<Array2<f64>> {
        let dim = self.structure.motion_input_dim();
        let mut x = Array2::<f64>::zeros((motions.len(), dim));
        for (i, m) in motions.iter().enumerate() {
            let norm = self.norm_stats.normalize_unbounded(m)?;
            let fixed = if norm.frames() == self.structure.frames {
                norm
            } else {
                norm.resample(self.structure.frames)?
            };
            let flat = fixed
                .data
                .into_shape((dim,))
                .map_err(|e| Error::Contract(e.to_string()))?;
            x.row_mut(i).assign(&flat);
        }
        let out = mlp_forward_plain(&self.params, "motion.mlp", 2, &x);
        Ok(normalize_rows_plain(out))
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        meta.insert(
            "structure".to_string(),
            serde_json::to_string(&self.structure)?,
        );
        meta.insert(
            "norm_stats".to_string(),
            serde_json::to_string(&self.norm_stats)?,
        );
        Ok(Checkpoint::from_params("embedder", &self.params, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<JointEmbedder> {
        if ckpt.kind != "embedder" {
            return Err(Error::Contract(format!(
                "expected embedder checkpoint, got {}",
                ckpt.kind
            )));
        }
        let structure: EmbedderStructure = serde_json::from_str(
            ckpt.meta
                .get("structure")
                .ok_or_else(|| Error::Integrity("embedder missing structure".to_string()))?,
        )?;
        let norm_stats: NormStats = serde_json::from_str(
            ckpt.meta
                .get("norm_stats")
                .ok_or_else(|| Error::Integrity("embedder missing norm stats".to_string()))?,
        )?;
        Ok(JointEmbedder {
            params: ckpt.params()?,
            structure,
            norm_stats,
        })
    }
}

/// Unit-norm embedding of one token sequence.
pub fn embed_text(tokens: &TokenSeq, embedder: &JointEmbedder) -> Result<Array1<f64>> {
    Ok(embedder
        .embed_texts(&[tokens])?
        .index_axis(Axis(0), 0)
        .to_owned())
}

/// Unit-norm embedding of one raw-unit motion.
pub fn embed_motion(motion: &MotionSequence, embedder: &JointEmbedder) -> Result<Array1<f64>> {
    Ok(embedder
        .embed_motions(&[motion])?
        .index_axis(Axis(0), 0)
        .to_owned())
}

/// Cosine similarity between a text and a motion (both live on the unit
/// sphere, so this is a plain dot product in [-1, 1]).
pub fn score(tokens: &TokenSeq, motion: &MotionSequence, embedder: &JointEmbedder) -> Result<f64> {
    let t = embed_text(tokens, embedder)?;
    let m = embed_motion(motion, embedder)?;
    Ok(t.dot(&m))
}

/// Provenance of a candidate motion. The ordering (raw < latent <
/// ground_truth) is the documented tie-break for equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTag {
    Raw,
    Latent,
    GroundTruth,
}

/// A candidate with its preference score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Index into the ranked set's motion list.
    pub motion_index: usize,
    pub score: f64,
    pub generator_tag: GeneratorTag,
}

/// Candidates for one prompt ordered from most to least preferred.
#[derive(Debug, Clone)]
pub struct RankedSet {
    pub prompt_id: u64,
    pub tokens: TokenSeq,
    /// Sorted by descending score (ties: generator tag, then index).
    pub candidates: Vec<ScoredCandidate>,
    pub motions: Vec<MotionSequence>,
}

impl RankedSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The motion at a given rank (0 = winner).
    pub fn motion_at_rank(&self, rank: usize) -> &MotionSequence {
        &self.motions[self.candidates[rank].motion_index]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.candidates.len();
        let mut seen = vec![false; n];
        for c in &self.candidates {
            if c.motion_index >= n || seen[c.motion_index] {
                return Err(Error::Contract(
                    "candidate indices must form a permutation".to_string(),
                ));
            }
            seen[c.motion_index] = true;
            if !c.score.is_finite() {
                return Err(Error::Numeric("candidate score not finite".to_string()));
            }
        }
        for w in self.candidates.windows(2) {
            if w[0].score < w[1].score {
                return Err(Error::Contract("scores must be non-increasing".to_string()));
            }
        }
        Ok(())
    }
}

/// Which judge scores candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Learned,
    Oracle,
}

/// A scoring backend: the trained embedder or the analytic judge.
pub enum Scorer<'a> {
    Learned(&'a JointEmbedder),
    Oracle,
}

impl Scorer<'_> {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Learned(_) => ScorerKind::Learned,
            Scorer::Oracle => ScorerKind::Oracle,
        }
    }

    /// Scores for a set of candidate motions under one prompt.
    pub fn score_candidates(
        &self,
        prompt: &PromptSpec,
        motions: &[MotionSequence],
    ) -> Result<Vec<f64>> {
        match self {
            Scorer::Learned(embedder) => {
                let tokens = render_tokens(prompt);
                let text = embed_text(&tokens, embedder)?;
                let refs: Vec<&MotionSequence> = motions.iter().collect();
                let emb = embedder.embed_motions(&refs)?;
                Ok((0..motions.len()).map(|i| emb.row(i).dot(&text)).collect())
            }
            Scorer::Oracle => Ok(motions
                .iter()
                .map(|m| crate::oracle::oracle_score(prompt, m))
                .collect()),
        }
    }
}

/// Order candidates by descending score with the documented tie-break:
/// generator tag (raw < latent < ground_truth), then original index.
pub fn rank(
    prompt: &PromptSpec,
    motions: Vec<MotionSequence>,
    tags: Vec<GeneratorTag>,
    scorer: &Scorer,
) -> Result<RankedSet> {
    if motions.len() < 2 {
        return Err(Error::Contract("ranking needs at least 2 candidates".to_string()));
    }
    if motions.len() != tags.len() {
        return Err(Error::Contract("tags must match motions".to_string()));
    }
    let scores = scorer.score_candidates(prompt, &motions)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scorer produced non-finite score".to_string()));
    }
    let mut candidates: Vec<ScoredCandidate> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredCandidate {
            motion_index: i,
            score: s,
            generator_tag: tags[i],
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.generator_tag.cmp(&b.generator_tag))
            .then(a.motion_index.cmp(&b.motion_index))
    });
    let rs = RankedSet {
        prompt_id: prompt.prompt_id,
        tokens: render_tokens(prompt),
        candidates,
        motions,
    };
    rs.validate()?;
    Ok(rs)
}

/// Ranker training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RankerConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub motion_hidden: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            embed_dim: 16,
            token_dim: 16,
            text_hidden: 32,
            motion_hidden: 128,
            temperature: 0.07,
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.batch < 2 {
            return Err(Error::Config("ranker dims/batch invalid".to_string()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankerLossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Symmetric in-batch contrastive training over (text, motion) pairs.
pub fn train_ranker(
    dataset: &MotionDataset,
    config: &RankerConfig,
    frames: usize,
    fps: u32,
    seed: u64,
) -> Result<(JointEmbedder, Vec<RankerLossRecord>)> {
    config.validate()?;
    let n = dataset.records.len();
    if n < config.batch {
        return Err(Error::Contract(format!(
            "train split smaller than one batch ({n} < {})",
            config.batch
        )));
    }
    let structure = EmbedderStructure {
        embed_dim: config.embed_dim,
        token_dim: config.token_dim,
        text_hidden: config.text_hidden,
        motion_hidden: config.motion_hidden,
        vocab: crate::domain::vocab_size(),
        frames,
        fps,
    };
    let mut embedder = init_embedder(
        structure,
        dataset.norm_stats.clone(),
        derive_seed(seed, "ranker-init", 0),
    );

    // Precompute flattened normalized motion inputs and token id lists.
    let dim = embedder.structure.motion_input_dim();
    let mut inputs = Array2::<f64>::zeros((n, dim));
    let mut ids_all: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut tokens_all: Vec<TokenSeq> = Vec::with_capacity(n);
    for (i, (p, m)) in dataset.records.iter().enumerate() {
        let norm = dataset.norm_stats.normalize(m)?;
        let fixed = if norm.frames() == frames {
            norm
        } else {
            norm.resample(frames)?
        };
        let flat = fixed
            .data
            .into_shape((dim,))
            .map_err(|e| Error::Contract(e.to_string()))?;
        inputs.row_mut(i).assign(&flat);
        let t = render_tokens(p);
        ids_all.push(t.tokens.iter().map(|&x| x as usize).collect());
        tokens_all.push(t);
    }

    let mut opt = Optimizer::new(config.optimizer, config.lr, 0.9);
    let mut order_rng = derived_rng(seed, "ranker-batch", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::with_capacity(config.steps);
    let inv_temp = 1.0 / config.temperature;

    for step in 0..config.steps {
        let mut batch_rows = Array2::<f64>::zeros((config.batch, dim));
        let mut batch_ids = Vec::with_capacity(config.batch);
        let mut batch_tokens = Vec::with_capacity(config.batch);
        for b in 0..config.batch {
            if cursor >= n {
                for i in (1..n).rev() {
                    let j = order_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            let rec = order[cursor];
            cursor += 1;
            batch_rows.row_mut(b).assign(&inputs.row(rec));
            batch_ids.push(ids_all[rec].clone());
            batch_tokens.push(tokens_all[rec].clone());
        }
        let distinct: std::collections::HashSet<_> =
            batch_tokens.iter().map(|t| t.tokens.clone()).collect();
        if distinct.len() < 2 {
            return Err(Error::Contract(
                "contrastive batch needs at least 2 distinct prompts".to_string(),
            ));
        }

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &embedder.params);

        let table = binding.var("text.embed.w");
        let pooled = tape.embed_mean(table, batch_ids.clone());
        let t_out = mlp_forward_tape(&mut tape, &binding, "text.mlp", 2, pooled);
        let t_emb = tape.normalize_rows(t_out);

        let m_in = tape.leaf(batch_rows.clone());
        let m_out = mlp_forward_tape(&mut tape, &binding, "motion.mlp", 2, m_in);
        let m_emb = tape.normalize_rows(m_out);

        let sim = tape.matmul_nt(t_emb, m_emb);
        let sim = tape.scale(sim, inv_temp);

        let lse_rows = tape.row_logsumexp(sim);
        let diag = tape.diag(sim);
        let row_gap = tape.sub(lse_rows, diag);
        let row_loss = tape.mean(row_gap);

        let sim_t = tape.transpose(sim);
        let lse_cols = tape.row_logsumexp(sim_t);
        let diag_t = tape.diag(sim_t);
        let col_gap = tape.sub(lse_cols, diag_t);
        let col_loss = tape.mean(col_gap);

        let sum = tape.add(row_loss, col_loss);
        let loss = tape.scale(sum, 0.5);

        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                msg: "contrastive loss became non-finite".to_string(),
            });
        }
        history.push(RankerLossRecord { step, loss: value });
        let node_grads = tape.backward(loss);
        let grads = binding.grads(&embedder.params, &node_grads);
        opt.step(&mut embedder.params, &grads, &FreezeMask::none());
    }

    Ok((embedder, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_dataset, Action, DomainConfig};

    fn tiny_structure() -> EmbedderStructure {
        EmbedderStructure {
            embed_dim: 8,
            token_dim: 8,
            text_hidden: 16,
            motion_hidden: 24,
            vocab: crate::domain::vocab_size(),
            frames: 16,
            fps: 20,
        }
    }

    fn tiny_domain() -> DomainConfig {
        DomainConfig {
            frames: 16,
            f_min: 8,
            f_max: 32,
            ..DomainConfig::default()
        }
    }

    fn stats() -> NormStats {
        build_dataset(40, 3, &tiny_domain()).unwrap().norm_stats().clone()
    }

    fn sample_prompt(i: u64) -> PromptSpec {
        PromptSpec::new(
            Action::ALL[(i % 5) as usize],
            0.6 + 0.1 * (i % 10) as f64,
            0.3 + 0.1 * (i % 10) as f64,
            0.3,
            i,
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let ds = build_dataset(40, 3, &tiny_domain()).unwrap();
        let emb = init_embedder(tiny_structure(), ds.norm_stats().clone(), 5);
        let p = sample_prompt(0);
        let tokens = render_tokens(&p);
        let t1 = embed_text(&tokens, &emb).unwrap();
        let t2 = embed_text(&tokens, &emb).unwrap();
        assert_eq!(t1, t2);
        assert!((t1.dot(&t1).sqrt() - 1.0).abs() < 1e-6);

        let m = &ds.train.records[0].1;
        let m1 = embed_motion(m, &emb).unwrap();
        let m2 = embed_motion(m, &emb).unwrap();
        assert_eq!(m1, m2);
        assert!((m1.dot(&m1).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn score_is_cosine_and_matches_independent_dot() {
        let ds = build_dataset(40, 3, &tiny_domain()).unwrap();
        let emb = init_embedder(tiny_structure(), ds.norm_stats().clone(), 5);
        let p = sample_prompt(1);
        let tokens = render_tokens(&p);
        let m = &ds.train.records[1].1;
        let s = score(&tokens, m, &emb).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        // Independent dot product over explicit loops.
        let t = embed_text(&tokens, &emb).unwrap();
        let me = embed_motion(m, &emb).unwrap();
        let mut dot = 0.0;
        for i in 0..t.len() {
            dot += t[i] * me[i];
        }
        assert!((s - dot).abs() < 1e-12);
    }

    #[test]
    fn rank_orders_by_descending_score() {
        // Oracle scorer on purpose-built motions: the candidate matching the
        // prompt's action must win.
        let cfg = DomainConfig {
            noise_scale: 0.0,
            ..tiny_domain()
        };
        let p = PromptSpec::new(Action::Walk, 1.0, 0.8, 0.0, 7).unwrap();
        let good = crate::domain::generate_ground_truth(&p, 16, 1, &cfg).unwrap();
        let spin_p = PromptSpec::new(Action::Spin, 1.0, 0.8, 0.0, 8).unwrap();
        let bad = crate::domain::generate_ground_truth(&spin_p, 16, 1, &cfg).unwrap();
        let stand_p = PromptSpec::new(Action::Stand, 1.0, 0.8, 0.0, 9).unwrap();
        let mid = crate::domain::generate_ground_truth(&stand_p, 16, 1, &cfg).unwrap();

        let rs = rank(
            &p,
            vec![bad.clone(), good.clone(), mid.clone()],
            vec![GeneratorTag::Raw, GeneratorTag::Latent, GeneratorTag::Raw],
            &Scorer::Oracle,
        )
        .unwrap();
        assert_eq!(rs.candidates[0].motion_index, 1);
        assert!(rs.candidates[0].score >= rs.candidates[1].score);
        assert!(rs.candidates[1].score >= rs.candidates[2].score);
        rs.validate().unwrap();
    }

    #[test]
    fn rank_breaks_ties_by_tag_then_index() {
        // A scorer that gives identical scores: all motions identical.
        let cfg = DomainConfig {
            noise_scale: 0.0,
            ..tiny_domain()
        };
        let p = PromptSpec::new(Action::Stand, 1.0, 0.8, 0.0, 7).unwrap();
        let m = crate::domain::generate_ground_truth(&p, 16, 1, &cfg).unwrap();
        let rs = rank(
            &p,
            vec![m.clone(), m.clone(), m.clone(), m.clone()],
            vec![
                GeneratorTag::Latent,
                GeneratorTag::Raw,
                GeneratorTag::GroundTruth,
                GeneratorTag::Raw,
            ],
            &Scorer::Oracle,
        )
        .unwrap();
        // Equal scores: raw (idx 1), raw (idx 3), latent (idx 0), gt (idx 2).
        let order: Vec<usize> = rs.candidates.iter().map(|c| c.motion_index).collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn rank_with_equal_scores_and_tags_preserves_index_order() {
        let cfg = DomainConfig {
            noise_scale: 0.0,
            ..tiny_domain()
        };
        let p = PromptSpec::new(Action::Stand, 1.0, 0.8, 0.0, 7).unwrap();
        let m = crate::domain::generate_ground_truth(&p, 16, 1, &cfg).unwrap();
        let rs = rank(
            &p,
            vec![m.clone(), m.clone(), m.clone()],
            vec![GeneratorTag::Raw; 3],
            &Scorer::Oracle,
        )
        .unwrap();
        let order: Vec<usize> = rs.candidates.iter().map(|c| c.motion_index).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn rank_of_permuted_input_has_same_motion_identity_order() {
        let mut rng = crate::seeding::rng_from_seed(9);
        let cfg = tiny_domain();
        let p = sample_prompt(3);
        let motions: Vec<MotionSequence> = (0..6)
            .map(|i| {
                crate::domain::generate_ground_truth(&sample_prompt(i), 16, i, &cfg).unwrap()
            })
            .collect();
        let tags = vec![GeneratorTag::Raw; 6];
        let base = rank(&p, motions.clone(), tags.clone(), &Scorer::Oracle).unwrap();
        let base_scores: Vec<u64> = base
            .candidates
            .iter()
            .map(|c| c.score.to_bits())
            .collect();

        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let shuffled: Vec<MotionSequence> =
                perm.iter().map(|&i| motions[i].clone()).collect();
            let rs = rank(&p, shuffled, tags.clone(), &Scorer::Oracle).unwrap();
            let scores: Vec<u64> = rs.candidates.iter().map(|c| c.score.to_bits()).collect();
            assert_eq!(scores, base_scores);
        }
    }

    #[test]
    fn rank_needs_two_candidates() {
        let cfg = tiny_domain();
        let p = sample_prompt(0);
        let m = crate::domain::generate_ground_truth(&p, 16, 0, &cfg).unwrap();
        let err = rank(&p, vec![m], vec![GeneratorTag::Raw], &Scorer::Oracle).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = build_dataset(40, 3, &tiny_domain()).unwrap().train;
        let cfg = RankerConfig {
            steps: 0,
            batch: 8,
            embed_dim: 8,
            token_dim: 8,
            text_hidden: 16,
            motion_hidden: 24,
            ..RankerConfig::default()
        };
        let (emb, hist) = train_ranker(&ds, &cfg, 16, 20, 5).unwrap();
        let init = init_embedder(
            emb.structure.clone(),
            ds.norm_stats.clone(),
            derive_seed(5, "ranker-init", 0),
        );
        assert!(emb.params.bitwise_eq(&init.params));
        assert!(hist.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_embedders() {
        let ds = build_dataset(40, 3, &tiny_domain()).unwrap().train;
        let cfg = RankerConfig {
            steps: 20,
            batch: 8,
            embed_dim: 8,
            token_dim: 8,
            text_hidden: 16,
            motion_hidden: 24,
            ..RankerConfig::default()
        };
        let (a, _) = train_ranker(&ds, &cfg, 16, 20, 5).unwrap();
        let (b, _) = train_ranker(&ds, &cfg, 16, 20, 5).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
    }

    #[test]
    fn contrastive_training_learns_matched_pairs() {
        let domain = tiny_domain();
        let splits = build_dataset(150, 3, &domain).unwrap();
        let cfg = RankerConfig {
            steps: 500,
            batch: 16,
            embed_dim: 8,
            token_dim: 8,
            text_hidden: 16,
            motion_hidden: 48,
            ..RankerConfig::default()
        };
        let (emb, hist) = train_ranker(&splits.train, &cfg, 16, 20, 5).unwrap();
        let early: f64 = hist[..30].iter().map(|r| r.loss).sum::<f64>() / 30.0;
        let late: f64 = hist[hist.len() - 30..].iter().map(|r| r.loss).sum::<f64>() / 30.0;
        assert!(late < early);

        // Held-out check: matched pair similarity beats a mismatched pair
        // (rotated pairing) most of the time.
        let val = &splits.val;
        let n = val.records.len();
        let mut wins = 0;
        for i in 0..n {
            let (p, m) = &val.records[i];
            let (_, m_other) = &val.records[(i + 1) % n];
            let tokens = render_tokens(p);
            let s_match = score(&tokens, m, &emb).unwrap();
            let s_mismatch = score(&tokens, m_other, &emb).unwrap();
            if s_match > s_mismatch {
                wins += 1;
            }
        }
        assert!(
            wins as f64 / n as f64 > 0.7,
            "only {wins}/{n} matched pairs preferred"
        );
    }

    #[test]
    fn embedder_checkpoint_round_trips() {
        let emb = init_embedder(tiny_structure(), stats(), 5);
        let ckpt = emb.to_checkpoint(BTreeMap::new()).unwrap();
        let back = JointEmbedder::from_checkpoint(&ckpt).unwrap();
        assert!(back.params.bitwise_eq(&emb.params));
        assert_eq!(back.structure, emb.structure);
        assert_eq!(back.norm_stats, emb.norm_stats);
    }
}

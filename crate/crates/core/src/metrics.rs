//! Evaluation suite: FID over Gaussian fits, R-precision, matching
//! distance, diversity, multimodality, bootstrap intervals, and the
//! winner/loser-of-N consistency protocol.
//!
//! All metric kernels operate on pre-computed embedding matrices so the
//! same code serves the learned embedding space and the analytic judge's
//! feature space, and so null-distribution checks can feed synthetic
//! embeddings directly.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sqrtm_psd, symmetrize};
use crate::seeding::{derive_seed, derived_rng};

/// Gaussian fit of an embedding population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean: Array1<f64>,
    /// Unbiased sample covariance, symmetrized.
    pub cov: Array2<f64>,
    pub n: usize,
}

/// Sample mean and unbiased covariance of embedding rows.
pub fn embedding_stats(embeddings: &Array2<f64>) -> Result<EmbeddingStats> {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    if n < d + 1 {
        return Err(Error::Contract(format!(
            "need at least D+1 = {} samples for stats, got {n}",
            d + 1
        )));
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("n > 0");
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in embeddings.rows() {
        let diff = &row.to_owned() - &mean;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += diff[i] * diff[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok(EmbeddingStats {
        mean,
        cov: symmetrize(&cov),
        n,
    })
}

/// Frechet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2))`.
///
/// The cross term uses the symmetrized product `A^(1/2) Cb A^(1/2)` with
/// `A = Ca`, whose eigenvalues match those of `Ca Cb`; negative
/// eigenvalues within tolerance are clamped to zero.
pub fn fid(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Contract("embedding dimension mismatch".to_string()));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);

    let sqrt_a = sqrtm_psd(&a.cov, 1e-8)?;
    let inner = sqrt_a.dot(&b.cov).dot(&sqrt_a);
    let (vals, _) = crate::linalg::sym_eig(&symmetrize(&inner))?;
    let tr_cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let tr_a: f64 = a.cov.diag().sum();
    let tr_b: f64 = b.cov.diag().sum();
    let value = mean_term + tr_a + tr_b - 2.0 * tr_cross;
    // Exact-zero cases can land a hair below zero numerically.
    Ok(value.max(0.0))
}

/// Fraction of evaluation pools where the true text ranks its motion
/// within the top k among `pool_size` distractor texts.
///
/// Pools are formed by seeded shuffling; every pool holds `pool_size`
/// items with pairwise-distinct keys (token sequences). Items that cannot
/// fill one more complete pool are dropped.
pub fn r_precision_from_embeddings(
    text_emb: &Array2<f64>,
    motion_emb: &Array2<f64>,
    keys: &[u64],
    k: usize,
    pool_size: usize,
    seed: u64,
) -> Result<f64> {
    let n = text_emb.nrows();
    if motion_emb.nrows() != n || keys.len() != n {
        return Err(Error::Contract("embedding/key length mismatch".to_string()));
    }
    if k == 0 || k > pool_size {
        return Err(Error::Contract("k must be in [1, pool_size]".to_string()));
    }
    let distinct: std::collections::HashSet<&u64> = keys.iter().collect();
    if distinct.len() < pool_size {
        return Err(Error::Contract(format!(
            "need {pool_size} distinct prompts, got {}",
            distinct.len()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, "rprec-shuffle", 0);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    // Greedy pool construction preserving the shuffled order.
    let mut pools: Vec<Vec<usize>> = Vec::new();
    let mut remaining: Vec<usize> = order;
    loop {
        let mut pool = Vec::with_capacity(pool_size);
        let mut used_keys = std::collections::HashSet::new();
        let mut rest = Vec::with_capacity(remaining.len());
        for idx in remaining.drain(..) {
            if pool.len() < pool_size && used_keys.insert(keys[idx]) {
                pool.push(idx);
            } else {
                rest.push(idx);
            }
        }
        if pool.len() < pool_size {
            break;
        }
        pools.push(pool);
        remaining = rest;
        if remaining.len() < pool_size {
            break;
        }
    }
    if pools.is_empty() {
        return Err(Error::Contract("not enough items for one pool".to_string()));
    }

    let mut hits = 0usize;
    let mut total = 0usize;
    for pool in &pools {
        for (own_pos, &item) in pool.iter().enumerate() {
            let m = motion_emb.row(item);
            let own_sim = text_emb.row(item).dot(&m);
            // Strictly-better count; ties resolved by pool position.
            let mut better = 0usize;
            for (pos, &other) in pool.iter().enumerate() {
                if pos == own_pos {
                    continue;
                }
                let s = text_emb.row(other).dot(&m);
                if s > own_sim || (s == own_sim && pos < own_pos) {
                    better += 1;
                }
            }
            if better < k {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Mean Euclidean distance between texts and their paired motions.
pub fn mm_dist_from_embeddings(text_emb: &Array2<f64>, motion_emb: &Array2<f64>) -> Result<f64> {
    let n = text_emb.nrows();
    if n == 0 || motion_emb.nrows() != n {
        return Err(Error::Contract("need matched non-empty pairs".to_string()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let d = &text_emb.row(i) - &motion_emb.row(i);
        acc += d.dot(&d).sqrt();
    }
    Ok(acc / n as f64)
}

/// Mean embedding distance over seeded random distinct-index pairs. When
/// `n_pairs` covers all C(n,2) pairs the exhaustive mean is returned.
pub fn diversity_from_embeddings(emb: &Array2<f64>, n_pairs: usize, seed: u64) -> Result<f64> {
    let n = emb.nrows();
    if n < 2 {
        return Err(Error::Contract("diversity needs at least 2 motions".to_string()));
    }
    let all_pairs = n * (n - 1) / 2;
    let dist = |i: usize, j: usize| -> f64 {
        let d = &emb.row(i) - &emb.row(j);
        d.dot(&d).sqrt()
    };
    if n_pairs >= all_pairs {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += dist(i, j);
            }
        }
        return Ok(acc / all_pairs as f64);
    }
    let mut rng = derived_rng(seed, "diversity", 0);
    let mut acc = 0.0;
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        acc += dist(i, j);
    }
    Ok(acc / n_pairs as f64)
}

/// Mean within-group pairwise distance, averaged over groups. Each group
/// needs at least 2 members; draws fall back to exhaustive enumeration
/// when they cover all pairs.
pub fn multimodality_from_groups(
    groups: &[Array2<f64>],
    draws_per_group: usize,
    seed: u64,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Contract("multimodality needs groups".to_string()));
    }
    let mut acc = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        let n = g.nrows();
        if n < 2 {
            return Err(Error::Contract(format!(
                "group {gi} has fewer than 2 generations"
            )));
        }
        let all_pairs = n * (n - 1) / 2;
        let dist = |i: usize, j: usize| -> f64 {
            let d = &g.row(i) - &g.row(j);
            d.dot(&d).sqrt()
        };
        let group_mean = if draws_per_group >= all_pairs {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += dist(i, j);
                }
            }
            s / all_pairs as f64
        } else {
            let mut rng = derived_rng(seed, "multimodality", gi as u64);
            let mut s = 0.0;
            for _ in 0..draws_per_group {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                s += dist(i, j);
            }
            s / draws_per_group as f64
        };
        acc += group_mean;
    }
    Ok(acc / groups.len() as f64)
}

/// A bootstrapped metric value: mean over replicates plus the replicate
/// standard deviation as the +- interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub interval: f64,
}

impl Stat {
    pub fn from_replicates(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            interval: var.sqrt(),
        }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.interval)
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Prompts evaluated.
    pub n_prompts: usize,
    /// Generations per prompt in the winner/loser protocol.
    pub n_gen: usize,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    pub multimodality_draws: usize,
    /// Seeded replications behind every +- interval.
    pub bootstrap: usize,
    /// Ground-truth motions per prompt in the FID reference population.
    pub gt_ref_per_prompt: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_prompts: 128,
            n_gen: 8,
            pool_size: 32,
            diversity_pairs: 300,
            multimodality_draws: 10,
            bootstrap: 20,
            gt_ref_per_prompt: 4,
        }
    }
}

/// Report metadata (provenance of one evaluation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub model_id: String,
    pub scorer_id: String,
    pub n_samples: usize,
    pub seed: u64,
}

/// Full metric suite for one population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: Stat,
    pub top2: Stat,
    pub top3: Stat,
    pub mm_dist: Stat,
    pub diversity: Stat,
    pub fid: Stat,
    /// Absent when groups are singletons (winner/loser subsets).
    pub multimodality: Option<Stat>,
    /// FID in the analytic judge's feature space, when reference stats
    /// were supplied.
    pub oracle_fid: Option<Stat>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("top1", &self.top1),
            ("top2", &self.top2),
            ("top3", &self.top3),
        ] {
            if !(0.0..=1.0).contains(&s.mean) {
                return Err(Error::Numeric(format!("{name} outside [0,1]")));
            }
        }
        if self.fid.mean < 0.0 || self.diversity.mean < 0.0 {
            return Err(Error::Numeric("fid/diversity negative".to_string()));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "model,scorer,n_samples,seed,top1,top2,top3,mm_dist,diversity,fid,multimodality,oracle_fid"
    }

    pub fn csv_row(&self) -> String {
        let opt = |s: &Option<Stat>| match s {
            Some(v) => v.to_string(),
            None => "-".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.metadata.model_id,
            self.metadata.scorer_id,
            self.metadata.n_samples,
            self.metadata.seed,
            self.top1,
            self.top2,
            self.top3,
            self.mm_dist,
            self.diversity,
            self.fid,
            opt(&self.multimodality),
            opt(&self.oracle_fid),
        )
    }
}

/// Pre-embedded evaluation items: one row per (text, motion) pair, plus
/// optional oracle features and per-prompt group boundaries.
pub struct EvalItems {
    pub text_emb: Array2<f64>,
    pub motion_emb: Array2<f64>,
    pub keys: Vec<u64>,
    pub oracle_features: Option<Array2<f64>>,
    /// Row ranges per prompt (for multimodality), when meaningful.
    pub groups: Option<Vec<std::ops::Range<usize>>>,
}

/// Reference (ground-truth) statistics the FID terms compare against.
pub struct ReferenceStats {
    pub learned: EmbeddingStats,
    pub oracle: Option<EmbeddingStats>,
}

/// Compute the full suite with bootstrap intervals.
pub fn evaluate_items(
    items: &EvalItems,
    reference: &ReferenceStats,
    cfg: &EvalConfig,
    metadata: EvalMetadata,
) -> Result<EvalReport> {
    let n = items.text_emb.nrows();
    if n == 0 {
        return Err(Error::Contract("no evaluation items".to_string()));
    }
    let seed = metadata.seed;
    let reps = cfg.bootstrap.max(1);

    let mut top = [Vec::new(), Vec::new(), Vec::new()];
    let mut mm = Vec::new();
    let mut div = Vec::new();
    let mut fids = Vec::new();
    let mut oracle_fids = Vec::new();
    let mut mms_groups = Vec::new();

    for r in 0..reps {
        let rep_seed = derive_seed(seed, "rep", r as u64);
        for (ki, k) in [1usize, 2, 3].iter().enumerate() {
            top[ki].push(r_precision_from_embeddings(
                &items.text_emb,
                &items.motion_emb,
                &items.keys,
                *k,
                cfg.pool_size,
                derive_seed(rep_seed, "rprec", *k as u64),
            )?);
        }
        // Bootstrap resample of items for the pairwise metrics.
        let mut rng = derived_rng(rep_seed, "resample", 0);
        let sample: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let take = |src: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::<f64>::zeros((n, src.ncols()));
            for (i, &s) in sample.iter().enumerate() {
                out.row_mut(i).assign(&src.row(s));
            }
            out
        };
        let t_res = take(&items.text_emb);
        let m_res = take(&items.motion_emb);
        mm.push(mm_dist_from_embeddings(&t_res, &m_res)?);
        div.push(diversity_from_embeddings(
            &m_res,
            cfg.diversity_pairs,
            derive_seed(rep_seed, "div", 0),
        )?);
        fids.push(fid(&embedding_stats(&m_res)?, &reference.learned)?);
        if let (Some(of), Some(oref)) = (&items.oracle_features, &reference.oracle) {
            let o_res = take(of);
            oracle_fids.push(fid(&embedding_stats(&o_res)?, oref)?);
        }
        if let Some(groups) = &items.groups {
            let slices: Vec<Array2<f64>> = groups
                .iter()
                .map(|r| items.motion_emb.slice(ndarray::s![r.clone(), ..]).to_owned())
                .collect();
            mms_groups.push(multimodality_from_groups(
                &slices,
                cfg.multimodality_draws,
                derive_seed(rep_seed, "mm", 0),
            )?);
        }
    }

    let report = EvalReport {
        top1: Stat::from_replicates(&top[0]),
        top2: Stat::from_replicates(&top[1]),
        top3: Stat::from_replicates(&top[2]),
        mm_dist: Stat::from_replicates(&mm),
        diversity: Stat::from_replicates(&div),
        fid: Stat::from_replicates(&fids),
        multimodality: if mms_groups.is_empty() {
            None
        } else {
            Some(Stat::from_replicates(&mms_groups))
        },
        oracle_fid: if oracle_fids.is_empty() {
            None
        } else {
            Some(Stat::from_replicates(&oracle_fids))
        },
        metadata,
    };
    report.validate()?;
    Ok(report)
}


/// Stable key identifying a token sequence (for pool distinctness).
pub fn token_key(tokens: &crate::domain::TokenSeq) -> u64 {
    tokens
        .tokens
        .iter()
        .fold(0xcbf29ce484222325u64, |h, &id| {
            (h ^ id as u64).wrapping_mul(0x100001b3)
        })
}

/// Output of the winner/loser-of-N consistency protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolOutput {
    pub all: EvalReport,
    pub winners: EvalReport,
    pub losers: EvalReport,
    /// Loser-subset FID minus winner-subset FID (learned space).
    pub fid_gap: f64,
    /// Same gap in the judge's feature space.
    pub oracle_fid_gap: f64,
    pub winner_score_mean: f64,
    pub loser_score_mean: f64,
}

/// Generate `n_gen` motions per prompt, rank them, and evaluate the full
/// metric suite on all generations, per-prompt best, and per-prompt worst.
///
/// The ground-truth reference population for both FID spaces is generated
/// fresh from the same prompts. With `n_gen = 1` the winner and loser
/// subsets degenerate to the full set.
#[allow(clippy::too_many_arguments)]
pub fn winner_loser_protocol(
    generator: &crate::diffusion::Generator,
    embedder: &crate::ranker::JointEmbedder,
    scorer: &crate::ranker::Scorer,
    prompts: &[crate::domain::PromptSpec],
    domain: &crate::domain::DomainConfig,
    cfg: &EvalConfig,
    model_id: &str,
    seed: u64,
) -> Result<ProtocolOutput> {
    use crate::domain::{generate_ground_truth, render_tokens, MotionSequence};

    if prompts.is_empty() || cfg.n_gen == 0 {
        return Err(Error::Contract("protocol needs prompts and n_gen >= 1".to_string()));
    }

    // Reference population.
    let mut gt_motions: Vec<MotionSequence> = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        for j in 0..cfg.gt_ref_per_prompt.max(1) {
            let s = derive_seed(seed, "gt-ref", (i * 8192 + j) as u64);
            gt_motions.push(generate_ground_truth(p, domain.frames, s, domain)?);
        }
    }
    let gt_refs: Vec<&MotionSequence> = gt_motions.iter().collect();
    let gt_learned = embedding_stats(&embedder.embed_motions(&gt_refs)?)?;
    let gt_oracle = embedding_stats(&oracle_feature_rows(&gt_motions))?;
    let reference = ReferenceStats {
        learned: gt_learned,
        oracle: Some(gt_oracle),
    };

    // Generations plus per-prompt ranking.
    let tag = match generator.space {
        crate::diffusion::SpaceKind::Raw => crate::ranker::GeneratorTag::Raw,
        crate::diffusion::SpaceKind::Latent => crate::ranker::GeneratorTag::Latent,
    };
    let mut all_motions: Vec<MotionSequence> = Vec::with_capacity(prompts.len() * cfg.n_gen);
    let mut winners: Vec<MotionSequence> = Vec::with_capacity(prompts.len());
    let mut losers: Vec<MotionSequence> = Vec::with_capacity(prompts.len());
    let mut winner_scores = Vec::with_capacity(prompts.len());
    let mut loser_scores = Vec::with_capacity(prompts.len());
    let mut groups = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let tokens = render_tokens(p);
        let motions =
            generator.sample_batch(&tokens, cfg.n_gen, derive_seed(seed, "protocol-gen", i as u64))?;
        if cfg.n_gen >= 2 {
            let ranked =
                crate::ranker::rank(p, motions.clone(), vec![tag; motions.len()], scorer)?;
            winners.push(ranked.motion_at_rank(0).clone());
            losers.push(ranked.motion_at_rank(ranked.len() - 1).clone());
            winner_scores.push(ranked.candidates[0].score);
            loser_scores.push(ranked.candidates[ranked.len() - 1].score);
        } else {
            winners.push(motions[0].clone());
            losers.push(motions[0].clone());
            let s = scorer.score_candidates(p, &motions)?;
            winner_scores.push(s[0]);
            loser_scores.push(s[0]);
        }
        let start = all_motions.len();
        all_motions.extend(motions);
        groups.push(start..all_motions.len());
    }

    // Embeddings shared across subsets: one text row per prompt.
    let token_seqs: Vec<crate::domain::TokenSeq> = prompts.iter().map(render_tokens).collect();
    let token_refs: Vec<&crate::domain::TokenSeq> = token_seqs.iter().collect();
    let text_per_prompt = embedder.embed_texts(&token_refs)?;
    let keys_per_prompt: Vec<u64> = token_seqs.iter().map(token_key).collect();

    let expand_texts = |per_item_prompt: &[usize]| -> (Array2<f64>, Vec<u64>) {
        let d = text_per_prompt.ncols();
        let mut out = Array2::<f64>::zeros((per_item_prompt.len(), d));
        let mut keys = Vec::with_capacity(per_item_prompt.len());
        for (row, &p) in per_item_prompt.iter().enumerate() {
            out.row_mut(row).assign(&text_per_prompt.row(p));
            keys.push(keys_per_prompt[p]);
        }
        (out, keys)
    };

    let all_prompt_idx: Vec<usize> = (0..prompts.len())
        .flat_map(|i| std::iter::repeat(i).take(cfg.n_gen))
        .collect();
    let one_per_prompt: Vec<usize> = (0..prompts.len()).collect();

    let build_items = |motions: &[MotionSequence],
                       prompt_idx: &[usize],
                       with_groups: bool|
     -> Result<EvalItems> {
        let refs: Vec<&MotionSequence> = motions.iter().collect();
        let motion_emb = embedder.embed_motions(&refs)?;
        let (text_emb, keys) = expand_texts(prompt_idx);
        Ok(EvalItems {
            text_emb,
            motion_emb,
            keys,
            oracle_features: Some(oracle_feature_rows(motions)),
            groups: if with_groups && cfg.n_gen >= 2 {
                Some(groups.clone())
            } else {
                None
            },
        })
    };

    let scorer_id = format!("{:?}", scorer.kind()).to_lowercase();
    let meta = |suffix: &str, n: usize| EvalMetadata {
        model_id: format!("{model_id}/{suffix}"),
        scorer_id: scorer_id.clone(),
        n_samples: n,
        seed,
    };

    let all_items = build_items(&all_motions, &all_prompt_idx, true)?;
    let all_report = evaluate_items(&all_items, &reference, cfg, meta("all", all_motions.len()))?;
    let w_items = build_items(&winners, &one_per_prompt, false)?;
    let w_report = evaluate_items(&w_items, &reference, cfg, meta("winners", winners.len()))?;
    let l_items = build_items(&losers, &one_per_prompt, false)?;
    let l_report = evaluate_items(&l_items, &reference, cfg, meta("losers", losers.len()))?;

    let oracle_fid_gap = match (&l_report.oracle_fid, &w_report.oracle_fid) {
        (Some(l), Some(w)) => l.mean - w.mean,
        _ => 0.0,
    };
    let n = prompts.len() as f64;
    Ok(ProtocolOutput {
        fid_gap: l_report.fid.mean - w_report.fid.mean,
        oracle_fid_gap,
        winner_score_mean: winner_scores.iter().sum::<f64>() / n,
        loser_score_mean: loser_scores.iter().sum::<f64>() / n,
        all: all_report,
        winners: w_report,
        losers: l_report,
    })
}

/// Judge feature rows for a motion list.
pub fn oracle_feature_rows(motions: &[crate::domain::MotionSequence]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((motions.len(), crate::oracle::ORACLE_FEATURE_DIM));
    for (i, m) in motions.iter().enumerate() {
        out.row_mut(i).assign(&crate::oracle::oracle_features(m));
    }
    out
}

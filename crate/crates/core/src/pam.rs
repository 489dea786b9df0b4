//! Ranked preference dataset: K generations per generator per prompt,
//! scored and ordered, with winner/loser pair selection on top.
//!
//! The dataset stores whole ranked sets rather than materialized pairs, so
//! training can draw any of the C(N,2) pairs per prompt and the selection
//! strategy can change between runs without rebuilding.
//!
//! File format: one manifest line followed by one JSON record per ranked
//! set. The manifest carries a content hash over the record bytes, verified
//! on load.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Generator;
use crate::domain::{MotionSequence, PromptSpec, TokenSeq};
use crate::error::{Error, Result};
use crate::hashing::hash_bytes;
use crate::ranker::{rank, GeneratorTag, RankedSet, Scorer, ScoredCandidate, ScorerKind};
use crate::seeding::derive_seed;

pub const PAM_SCHEMA_VERSION: u32 = 1;

/// How a winner/loser pair is drawn from a ranked set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    Edge,
    Stochastic,
}

/// Pair provenance flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFlags {
    pub gt_substituted: bool,
    pub online: bool,
    pub selection: SelectionKind,
}

/// One training pair: a preferred and a dispreferred motion for a prompt.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub prompt_id: u64,
    pub tokens: TokenSeq,
    pub winner: MotionSequence,
    pub loser: MotionSequence,
    pub winner_score: f64,
    pub loser_score: f64,
    pub flags: PairFlags,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if !self.flags.gt_substituted && self.winner_score <= self.loser_score {
            return Err(Error::Contract(
                "winner score must exceed loser score".to_string(),
            ));
        }
        if self.winner == self.loser {
            return Err(Error::Contract("winner and loser must differ".to_string()));
        }
        Ok(())
    }
}

/// All generations for one prompt before/after ranking, with the seeds that
/// produced them (parallel to the ranked set's motion list).
#[derive(Debug, Clone)]
pub struct PamEntry {
    pub ranked: RankedSet,
    pub seeds: Vec<u64>,
}

/// Build-time identity of the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PamManifest {
    pub schema: u32,
    pub k: usize,
    pub seed: u64,
    pub scorer: ScorerKind,
    /// (generator tag, checkpoint hash) per contributing generator.
    pub generators: Vec<(GeneratorTag, String)>,
    /// Identity of the scoring model ("oracle" or an embedder hash).
    pub ranker_id: String,
    pub n_prompts: usize,
    /// Hash over all serialized record lines.
    pub content_hash: String,
}

/// The ranked preference dataset.
#[derive(Debug, Clone)]
pub struct PamDataset {
    pub entries: Vec<PamEntry>,
    pub manifest: PamManifest,
}

impl PamDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_for(&self, prompt_id: u64) -> Option<&PamEntry> {
        self.entries.iter().find(|e| e.ranked.prompt_id == prompt_id)
    }
}

/// Number of unordered winner/loser pairs in a ranked set of size `n`.
pub fn pair_count(n: usize) -> Result<u64> {
    if n < 2 {
        return Err(Error::Contract(format!("pair_count needs N >= 2, got {n}")));
    }
    Ok((n as u64) * (n as u64 - 1) / 2)
}

/// Generate, score, and rank candidates for every prompt. Deterministic in
/// `(generator checkpoints, prompts, k, scorer, seed)`.
pub fn build_pam(
    generators: &[(GeneratorTag, &Generator)],
    prompts: &[PromptSpec],
    k: usize,
    scorer: &Scorer,
    seed: u64,
) -> Result<PamDataset> {
    if k < 1 {
        return Err(Error::Contract("K must be >= 1".to_string()));
    }
    if generators.is_empty() {
        return Err(Error::Contract("need at least one generator".to_string()));
    }
    let mut entries = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let tokens = crate::domain::render_tokens(prompt);
        let mut motions = Vec::with_capacity(generators.len() * k);
        let mut tags = Vec::with_capacity(generators.len() * k);
        let mut seeds = Vec::with_capacity(generators.len() * k);
        for (tag, generator) in generators {
            let tag_name = format!("{tag:?}");
            let gen_seed = derive_seed(seed, &format!("pam-gen-{tag_name}"), prompt.prompt_id);
            let batch = generator.sample_batch(&tokens, k, gen_seed).map_err(|e| {
                Error::Build(format!(
                    "generator {tag_name} failed for prompt {}: {e}",
                    prompt.prompt_id
                ))
            })?;
            for (i, m) in batch.into_iter().enumerate() {
                motions.push(m);
                tags.push(*tag);
                seeds.push(derive_seed(gen_seed, "sample", i as u64));
            }
        }
        let ranked = rank(prompt, motions, tags, scorer)?;
        entries.push(PamEntry { ranked, seeds });
    }

    let ranker_id = match scorer {
        Scorer::Oracle => "oracle".to_string(),
        Scorer::Learned(e) => {
            let ckpt = e.to_checkpoint(Default::default())?;
            ckpt.hash().to_string()
        }
    };
    let generator_hashes: Vec<(GeneratorTag, String)> = generators
        .iter()
        .map(|(tag, g)| {
            let ckpt = g.to_checkpoint(Default::default())?;
            Ok((*tag, ckpt.hash().to_string()))
        })
        .collect::<Result<_>>()?;

    let mut dataset = PamDataset {
        entries,
        manifest: PamManifest {
            schema: PAM_SCHEMA_VERSION,
            k,
            seed,
            scorer: scorer.kind(),
            generators: generator_hashes,
            ranker_id,
            n_prompts: prompts.len(),
            content_hash: String::new(),
        },
    };
    dataset.manifest.content_hash = hash_bytes(render_records(&dataset)?.as_bytes());
    Ok(dataset)
}

/// Draw (winner rank, loser rank) under a selection strategy. Edge takes
/// the extremes; stochastic picks the winner uniformly from the top half
/// and the loser uniformly from the bottom half, never touching the middle
/// rank of an odd-sized set. This is the single source of truth for the
/// half-split semantics; both the pair constructors and the alignment loop
/// go through it.
pub fn selection_ranks(
    n: usize,
    selection: SelectionKind,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::Contract("need at least 2 candidates".to_string()));
    }
    match selection {
        SelectionKind::Edge => Ok((0, n - 1)),
        SelectionKind::Stochastic => {
            let rng = rng.ok_or_else(|| {
                Error::Contract("stochastic selection needs an rng".to_string())
            })?;
            let half = n / 2;
            let winner_rank = rng.gen_range(0..half);
            let loser_rank = rng.gen_range(n - half..n);
            Ok((winner_rank, loser_rank))
        }
    }
}

/// One Bernoulli roll for ground-truth substitution.
pub fn gt_roll(gt_p: f64, rng: &mut ChaCha8Rng) -> Result<bool> {
    if !(0.0..=1.0).contains(&gt_p) {
        return Err(Error::Contract(format!("GT_p {gt_p} outside [0,1]")));
    }
    Ok(gt_p > 0.0 && rng.gen_range(0.0..1.0) < gt_p)
}

/// Winner = best rank, loser = worst rank.
pub fn select_pair_edge(entry: &RankedSet) -> Result<PreferencePair> {
    let (w, l) = selection_ranks(entry.len(), SelectionKind::Edge, None)?;
    pair_from_ranks(entry, w, l, SelectionKind::Edge)
}

/// Winner uniform over the top half, loser uniform over the bottom half;
/// for odd N the middle rank is never selected.
pub fn select_pair_stochastic(entry: &RankedSet, rng: &mut ChaCha8Rng) -> Result<PreferencePair> {
    let (w, l) = selection_ranks(entry.len(), SelectionKind::Stochastic, Some(rng))?;
    pair_from_ranks(entry, w, l, SelectionKind::Stochastic)
}

fn pair_from_ranks(
    entry: &RankedSet,
    winner_rank: usize,
    loser_rank: usize,
    selection: SelectionKind,
) -> Result<PreferencePair> {
    let w = &entry.candidates[winner_rank];
    let l = &entry.candidates[loser_rank];
    let pair = PreferencePair {
        prompt_id: entry.prompt_id,
        tokens: entry.tokens.clone(),
        winner: entry.motions[w.motion_index].clone(),
        loser: entry.motions[l.motion_index].clone(),
        winner_score: w.score,
        loser_score: l.score,
        flags: PairFlags {
            gt_substituted: false,
            online: false,
            selection,
        },
    };
    Ok(pair)
}

/// With probability `gt_p`, replace the winner with the prompt's ground
/// truth and set the flag; the loser is never touched.
pub fn maybe_substitute_gt(
    mut pair: PreferencePair,
    gt_motion: &MotionSequence,
    gt_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PreferencePair> {
    if gt_roll(gt_p, rng)? {
        pair.winner = gt_motion.clone();
        pair.flags.gt_substituted = true;
    }
    Ok(pair)
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRecord {
    generator_tag: GeneratorTag,
    seed: u64,
    score: f64,
    motion_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PamRecord {
    schema: u32,
    prompt_id: u64,
    tokens: Vec<u16>,
    /// In rank order (winner first).
    candidates: Vec<CandidateRecord>,
    fps: u32,
    frames: usize,
    features: usize,
    /// Row-major motion payloads in original (motion_index) order.
    motions: Vec<Vec<f64>>,
}

fn render_records(dataset: &PamDataset) -> Result<String> {
    let mut out = String::new();
    for entry in &dataset.entries {
        let rs = &entry.ranked;
        let frames = rs.motions[0].frames();
        let rec = PamRecord {
            schema: PAM_SCHEMA_VERSION,
            prompt_id: rs.prompt_id,
            tokens: rs.tokens.tokens.clone(),
            candidates: rs
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    generator_tag: c.generator_tag,
                    seed: entry.seeds[c.motion_index],
                    score: c.score,
                    motion_index: c.motion_index,
                })
                .collect(),
            fps: rs.motions[0].fps,
            frames,
            features: rs.motions[0].features(),
            motions: rs
                .motions
                .iter()
                .map(|m| m.data.iter().cloned().collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Persist the dataset: manifest line first, then one record per line.
pub fn save_pam(path: &Path, dataset: &PamDataset) -> Result<()> {
    let records = render_records(dataset)?;
    let expected = hash_bytes(records.as_bytes());
    if expected != dataset.manifest.content_hash {
        return Err(Error::Integrity(
            "manifest content hash does not match records".to_string(),
        ));
    }
    let mut out = serde_json::to_string(&dataset.manifest)?;
    out.push('\n');
    out.push_str(&records);
    crate::artifacts::atomic_write(path, out.as_bytes())
}

/// Load and verify a persisted dataset.
pub fn load_pam(path: &Path) -> Result<PamDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.splitn(2, '\n');
    let manifest_line = lines
        .next()
        .ok_or_else(|| Error::Integrity("empty dataset file".to_string()))?;
    let manifest: PamManifest = serde_json::from_str(manifest_line)
        .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
    if manifest.schema != PAM_SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "unknown schema version {}",
            manifest.schema
        )));
    }
    let body = lines.next().unwrap_or("");
    let actual = hash_bytes(body.as_bytes());
    if actual != manifest.content_hash {
        return Err(Error::Integrity(
            "content hash mismatch: file is corrupted or was edited".to_string(),
        ));
    }

    let mut entries = Vec::new();
    for line in body.lines() {
        if line.is_empty() {
            continue;
        }
        let rec: PamRecord = serde_json::from_str(line)
            .map_err(|e| Error::Integrity(format!("unreadable record: {e}")))?;
        if rec.schema != PAM_SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "unknown record schema {}",
                rec.schema
            )));
        }
        let motions: Vec<MotionSequence> = rec
            .motions
            .iter()
            .map(|payload| {
                if payload.len() != rec.frames * rec.features {
                    return Err(Error::Integrity(format!(
                        "record {}: motion payload length mismatch",
                        rec.prompt_id
                    )));
                }
                let data = Array2::from_shape_vec((rec.frames, rec.features), payload.clone())
                    .map_err(|e| Error::Integrity(e.to_string()))?;
                MotionSequence::new(data, rec.fps)
            })
            .collect::<Result<_>>()?;
        let mut seeds = vec![0u64; motions.len()];
        let candidates: Vec<ScoredCandidate> = rec
            .candidates
            .iter()
            .map(|c| {
                if c.motion_index >= motions.len() {
                    return Err(Error::Integrity("candidate index out of range".to_string()));
                }
                seeds[c.motion_index] = c.seed;
                Ok(ScoredCandidate {
                    motion_index: c.motion_index,
                    score: c.score,
                    generator_tag: c.generator_tag,
                })
            })
            .collect::<Result<_>>()?;
        let ranked = RankedSet {
            prompt_id: rec.prompt_id,
            tokens: TokenSeq { tokens: rec.tokens },
            candidates,
            motions,
        };
        ranked.validate()?;
        entries.push(PamEntry { ranked, seeds });
    }
    Ok(PamDataset { entries, manifest })
}

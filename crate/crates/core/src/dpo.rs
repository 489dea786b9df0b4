//! Preference alignment: a frozen reference next to a trainable target,
//! a per-timestep diffusion preference loss, selective freezing, and the
//! offline and online training loops.
//!
//! The loss compares how much better the target denoises the winner than
//! the loser, relative to the reference:
//!
//! ```text
//! bracket = (|eps_w - eps_target(x_t^w)|^2 - |eps_w - eps_ref(x_t^w)|^2)
//!         - (|eps_l - eps_target(x_t^l)|^2 - |eps_l - eps_ref(x_t^l)|^2)
//! loss    = -log sigmoid(-beta_eff * bracket) = softplus(beta_eff * bracket)
//! ```
//!
//! Squared errors are averaged over state elements, matching the denoising
//! loss; the timestep weighting is folded into `beta_eff = beta_dpo * T`.
//! With the target equal to the reference the bracket cancels identically
//! and the loss is exactly `ln 2` for every pair, timestep, and noise draw.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape};
use crate::diffusion::{q_sample, token_ids, Generator, SpaceKind};
use crate::domain::{MotionSequence, PromptSpec, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{ParamGrads, TapeBinding};
use crate::opt::{FreezeMask, Optimizer};
use crate::pam::{gt_roll, selection_ranks, PamDataset, PreferencePair, SelectionKind};
use crate::ranker::Scorer;
use crate::seeding::{derive_seed, derived_rng};

/// Which parameters stay frozen during alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "layers")]
pub enum FreezePolicy {
    /// The VAE is frozen and the whole denoiser trains (latent family).
    DenoiserOnly,
    /// Only the last L trunk layers of the denoiser train.
    LastLayers(usize),
}

/// Alignment run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Which generator family is aligned.
    pub family: SpaceKind,
    /// DPO temperature; the effective loss scale is `beta_dpo * T`.
    pub beta_dpo: f64,
    pub selection: SelectionKind,
    pub gt_p: f64,
    pub online: bool,
    /// Generations per prompt in online mode.
    pub online_k: usize,
    pub freeze_policy: FreezePolicy,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Pairs per optimization step.
    pub batch: usize,
    /// Gradient steps taken on each online pair batch.
    pub inner_iters: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            family: SpaceKind::Latent,
            beta_dpo: 5.0,
            selection: SelectionKind::Stochastic,
            gt_p: 0.0,
            online: false,
            online_k: 4,
            freeze_policy: FreezePolicy::DenoiserOnly,
            lr: 1e-4,
            momentum: 0.9,
            steps: 2000,
            batch: 32,
            inner_iters: 1,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_dpo <= 0.0 {
            return Err(Error::Config("beta_dpo must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.gt_p) {
            return Err(Error::Config("gt_p outside [0,1]".to_string()));
        }
        if let FreezePolicy::LastLayers(l) = self.freeze_policy {
            if l == 0 {
                return Err(Error::Config("last_layers needs L >= 1".to_string()));
            }
        }
        if self.batch == 0 || self.online_k < 2 || self.inner_iters == 0 {
            return Err(Error::Config("invalid batch/online_k/inner_iters".to_string()));
        }
        Ok(())
    }

    pub fn beta_eff(&self, t_max: usize) -> f64 {
        self.beta_dpo * t_max as f64
    }
}

/// Frozen reference plus trainable target, initialized identical.
pub struct RefTargetPair {
    pub reference: Generator,
    pub target: Generator,
    pub freeze: FreezeMask,
}

impl RefTargetPair {
    pub fn from_base(base: &Generator, policy: FreezePolicy) -> Result<RefTargetPair> {
        let freeze = apply_freeze(base, policy)?;
        Ok(RefTargetPair {
            reference: base.clone(),
            target: base.clone(),
            freeze,
        })
    }

    /// True when every frozen target parameter is bitwise identical to the
    /// reference (the VAE of a latent pair is checked as a whole).
    pub fn frozen_params_intact(&self) -> bool {
        for name in self.freeze.frozen_names() {
            let a = self.target.net.params.get(name);
            let b = self.reference.net.params.get(name);
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return false;
            }
        }
        match (&self.target.vae, &self.reference.vae) {
            (Some(t), Some(r)) => t.params.bitwise_eq(&r.params),
            (None, None) => true,
            _ => false,
        }
    }
}

/// Compute the freeze mask for a policy over a generator's denoiser.
///
/// `denoiser_only` requires the latent family (its point is that the VAE
/// stays frozen while the whole denoiser trains). `last_layers(L)` freezes
/// the conditioning embedder and every trunk layer below the last L.
pub fn apply_freeze(generator: &Generator, policy: FreezePolicy) -> Result<FreezeMask> {
    let mut mask = FreezeMask::none();
    match policy {
        FreezePolicy::DenoiserOnly => {
            if generator.space != SpaceKind::Latent {
                return Err(Error::Config(
                    "denoiser_only freeze policy requires the latent family".to_string(),
                ));
            }
        }
        FreezePolicy::LastLayers(l) => {
            let n_layers = generator.net.structure.n_trunk_layers();
            if l == 0 || l > n_layers {
                return Err(Error::Config(format!(
                    "last_layers({l}) incompatible with {n_layers} trunk layers"
                )));
            }
            for (name, role) in generator.net.layer_partition() {
                match role {
                    crate::diffusion::LayerRole::Embedder => mask.freeze(&name),
                    crate::diffusion::LayerRole::Trunk(i) => {
                        if i + 1 <= n_layers - l {
                            mask.freeze(&name);
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Scalar form of the preference loss given the four per-branch errors.
pub fn dpo_loss_from_errors(
    err_w_target: f64,
    err_w_ref: f64,
    err_l_target: f64,
    err_l_ref: f64,
    beta_eff: f64,
) -> f64 {
    let bracket = (err_w_target - err_w_ref) - (err_l_target - err_l_ref);
    softplus(beta_eff * bracket)
}

/// A batch of encoded pairs ready for the loss.
pub struct PairBatch {
    pub winner_states: Array2<f64>,
    pub loser_states: Array2<f64>,
    pub ids: Vec<Vec<usize>>,
    pub ts: Vec<usize>,
    pub eps_w: Array2<f64>,
    pub eps_l: Array2<f64>,
}

struct DpoTape {
    tape: Tape,
    binding: TapeBinding,
    loss: crate::autodiff::Var,
    brackets: Vec<f64>,
}

fn build_dpo_tape(
    target: &Generator,
    reference: &Generator,
    batch: &PairBatch,
    beta_eff: f64,
) -> Result<DpoTape> {
    let b = batch.ts.len();
    let dim = target.state_dim();
    if batch.winner_states.shape() != [b, dim] || batch.loser_states.shape() != [b, dim] {
        return Err(Error::Contract("pair states do not match the target space".to_string()));
    }
    if reference.state_dim() != dim || reference.space != target.space {
        return Err(Error::Contract("reference/target space mismatch".to_string()));
    }
    let sched = &target.sched;
    for &t in &batch.ts {
        if t < 1 || t > sched.t_max() {
            return Err(Error::Contract(format!("t = {t} outside schedule")));
        }
    }

    // Noised inputs (constants for parameter gradients).
    let mut xt_w = Array2::<f64>::zeros((b, dim));
    let mut xt_l = Array2::<f64>::zeros((b, dim));
    for i in 0..b {
        let w = q_sample(
            &batch.winner_states.row(i).insert_axis(Axis(0)).to_owned(),
            batch.ts[i],
            &batch.eps_w.row(i).insert_axis(Axis(0)).to_owned(),
            sched,
        )?;
        xt_w.row_mut(i).assign(&w.row(0));
        let l = q_sample(
            &batch.loser_states.row(i).insert_axis(Axis(0)).to_owned(),
            batch.ts[i],
            &batch.eps_l.row(i).insert_axis(Axis(0)).to_owned(),
            sched,
        )?;
        xt_l.row_mut(i).assign(&l.row(0));
    }

    // Reference branch: plain forward, excluded from differentiation.
    let ref_pred_w = reference.net.forward_plain(&xt_w, &batch.ts, &batch.ids, None)?;
    let ref_pred_l = reference.net.forward_plain(&xt_l, &batch.ts, &batch.ids, None)?;
    let row_mse = |pred: &Array2<f64>, eps: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((b, 1));
        for i in 0..b {
            let mut acc = 0.0;
            for j in 0..dim {
                let d = eps[[i, j]] - pred[[i, j]];
                acc += d * d;
            }
            out[[i, 0]] = acc / dim as f64;
        }
        out
    };
    let err_w_ref = row_mse(&ref_pred_w, &batch.eps_w);
    let err_l_ref = row_mse(&ref_pred_l, &batch.eps_l);

    // Target branch on the tape.
    let mut tape = Tape::new();
    let binding = TapeBinding::bind(&mut tape, &target.net.params);

    let xt_w_leaf = tape.leaf(xt_w);
    let pred_w = target
        .net
        .forward_tape(&mut tape, &binding, xt_w_leaf, &batch.ts, &batch.ids, None);
    let eps_w_leaf = tape.leaf(batch.eps_w.clone());
    let diff_w = tape.sub(eps_w_leaf, pred_w);
    let sq_w = tape.square(diff_w);
    let err_w_t = tape.row_mean(sq_w);

    let xt_l_leaf = tape.leaf(xt_l);
    let pred_l = target
        .net
        .forward_tape(&mut tape, &binding, xt_l_leaf, &batch.ts, &batch.ids, None);
    let eps_l_leaf = tape.leaf(batch.eps_l.clone());
    let diff_l = tape.sub(eps_l_leaf, pred_l);
    let sq_l = tape.square(diff_l);
    let err_l_t = tape.row_mean(sq_l);

    let err_w_ref_leaf = tape.leaf(err_w_ref);
    let err_l_ref_leaf = tape.leaf(err_l_ref);
    let w_gap = tape.sub(err_w_t, err_w_ref_leaf);
    let l_gap = tape.sub(err_l_t, err_l_ref_leaf);
    let bracket = tape.sub(w_gap, l_gap);
    let brackets: Vec<f64> = tape.value(bracket).column(0).to_vec();
    let scaled = tape.scale(bracket, beta_eff);
    let per_pair = tape.softplus_of(scaled);
    let loss = tape.mean(per_pair);

    Ok(DpoTape {
        tape,
        binding,
        loss,
        brackets,
    })
}

/// Encode a pair's motions into a generator's state space.
pub fn encode_pair(generator: &Generator, pair: &PreferencePair) -> Result<(Array1<f64>, Array1<f64>)> {
    Ok((
        generator.encode_state(&pair.winner)?,
        generator.encode_state(&pair.loser)?,
    ))
}

/// Preference loss for a single pair at one timestep and noise draw.
pub fn dpo_diffusion_loss(
    target: &Generator,
    reference: &Generator,
    pair: &PreferencePair,
    t: usize,
    eps_w: &Array1<f64>,
    eps_l: &Array1<f64>,
    beta_eff: f64,
) -> Result<f64> {
    let (w, l) = encode_pair(target, pair)?;
    let dim = target.state_dim();
    if eps_w.len() != dim || eps_l.len() != dim {
        return Err(Error::Contract("noise dimension mismatch".to_string()));
    }
    let batch = PairBatch {
        winner_states: w.insert_axis(Axis(0)),
        loser_states: l.insert_axis(Axis(0)),
        ids: vec![token_ids(&pair.tokens)],
        ts: vec![t],
        eps_w: eps_w.clone().insert_axis(Axis(0)),
        eps_l: eps_l.clone().insert_axis(Axis(0)),
    };
    let built = build_dpo_tape(target, reference, &batch, beta_eff)?;
    let v = built.tape.scalar(built.loss);
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite dpo loss".to_string()));
    }
    Ok(v)
}

/// Analytic gradients of the batched loss with respect to target params.
pub fn dpo_gradients(
    target: &Generator,
    reference: &Generator,
    batch: &PairBatch,
    beta_eff: f64,
) -> Result<(f64, ParamGrads, Vec<f64>)> {
    let built = build_dpo_tape(target, reference, batch, beta_eff)?;
    let loss = built.tape.scalar(built.loss);
    let node_grads = built.tape.backward(built.loss);
    let grads = built.binding.grads(&target.net.params, &node_grads);
    Ok((loss, grads, built.brackets))
}

/// Batched loss without gradients.
pub fn dpo_batch_loss(
    target: &Generator,
    reference: &Generator,
    batch: &PairBatch,
    beta_eff: f64,
) -> Result<f64> {
    let built = build_dpo_tape(target, reference, batch, beta_eff)?;
    Ok(built.tape.scalar(built.loss))
}

/// One line of the alignment log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignLogRecord {
    pub step: usize,
    pub loss: f64,
    /// Fraction of pairs in the step with a negative bracket (the target
    /// denoises the winner better than the reference trade-off).
    pub implicit_accuracy: f64,
    pub lr: f64,
}

/// Result of an alignment run.
#[derive(Debug)]
pub struct AlignOutcome {
    pub aligned: Generator,
    pub log: Vec<AlignLogRecord>,
    /// Reference checkpoint hash, identical before and after by contract.
    pub reference_hash: String,
}

/// Ground-truth motions per prompt id, used for GT substitution.
pub type GtLookup = BTreeMap<u64, MotionSequence>;

/// Offline alignment against a prebuilt preference dataset.
///
/// Each step draws `batch` pairs (prompt uniform, ranks via the configured
/// selection, optional GT substitution), samples one shared timestep and
/// fresh per-branch noise per pair, and takes one gradient step.
pub fn align_offline(
    pam: &PamDataset,
    gt: &GtLookup,
    base: &Generator,
    config: &AlignmentConfig,
) -> Result<AlignOutcome> {
    config.validate()?;
    if pam.is_empty() {
        return Err(Error::Contract("preference dataset is empty".to_string()));
    }
    let mut pair_state = RefTargetPair::from_base(base, config.freeze_policy)?;
    let reference_hash = pair_state
        .reference
        .to_checkpoint(BTreeMap::new())?
        .hash()
        .to_string();

    // Encode every candidate once; selection then indexes into the cache.
    let dim = base.state_dim();
    let mut state_cache: Vec<Array2<f64>> = Vec::with_capacity(pam.len());
    let mut gt_states: Vec<Option<Array1<f64>>> = Vec::with_capacity(pam.len());
    let mut ids_cache: Vec<Vec<usize>> = Vec::with_capacity(pam.len());
    for entry in &pam.entries {
        let n = entry.ranked.motions.len();
        let mut states = Array2::<f64>::zeros((n, dim));
        for (i, m) in entry.ranked.motions.iter().enumerate() {
            states.row_mut(i).assign(&base.encode_state(m)?);
        }
        state_cache.push(states);
        gt_states.push(match gt.get(&entry.ranked.prompt_id) {
            Some(m) => Some(base.encode_state(m)?),
            None => None,
        });
        ids_cache.push(token_ids(&entry.ranked.tokens));
    }
    if config.gt_p > 0.0 && gt_states.iter().any(|s| s.is_none()) {
        return Err(Error::Contract(
            "gt_p > 0 requires a ground-truth motion for every prompt".to_string(),
        ));
    }

    let beta_eff = config.beta_eff(base.sched.t_max());
    let mut opt = Optimizer::sgd(config.lr, config.momentum);
    let mut pair_rng = derived_rng(config.seed, "align-pair", 0);
    let mut noise_rng = derived_rng(config.seed, "align-noise", 0);
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut winner_states = Array2::<f64>::zeros((config.batch, dim));
        let mut loser_states = Array2::<f64>::zeros((config.batch, dim));
        let mut ids = Vec::with_capacity(config.batch);
        for b in 0..config.batch {
            let e = pair_rng.gen_range(0..pam.len());
            let entry = &pam.entries[e];
            let (w_rank, l_rank) =
                selection_ranks(entry.ranked.len(), config.selection, Some(&mut pair_rng))?;
            let w_idx = entry.ranked.candidates[w_rank].motion_index;
            let l_idx = entry.ranked.candidates[l_rank].motion_index;
            if gt_roll(config.gt_p, &mut pair_rng)? {
                let gt_state = gt_states[e].as_ref().expect("checked above");
                winner_states.row_mut(b).assign(gt_state);
            } else {
                winner_states.row_mut(b).assign(&state_cache[e].row(w_idx));
            }
            loser_states.row_mut(b).assign(&state_cache[e].row(l_idx));
            ids.push(ids_cache[e].clone());
        }
        let ts: Vec<usize> = (0..config.batch)
            .map(|_| noise_rng.gen_range(1..=base.sched.t_max()))
            .collect();
        let eps_w = Array2::from_shape_fn((config.batch, dim), |_| {
            StandardNormal.sample(&mut noise_rng)
        });
        let eps_l = Array2::from_shape_fn((config.batch, dim), |_| {
            StandardNormal.sample(&mut noise_rng)
        });
        let batch = PairBatch {
            winner_states,
            loser_states,
            ids,
            ts,
            eps_w,
            eps_l,
        };
        step_once(
            &mut pair_state,
            &batch,
            beta_eff,
            &mut opt,
            config,
            step,
            &mut log,
        )?;
    }

    debug_assert!(pair_state.frozen_params_intact());
    Ok(AlignOutcome {
        aligned: pair_state.target,
        log,
        reference_hash,
    })
}

fn step_once(
    pair_state: &mut RefTargetPair,
    batch: &PairBatch,
    beta_eff: f64,
    opt: &mut Optimizer,
    config: &AlignmentConfig,
    step: usize,
    log: &mut Vec<AlignLogRecord>,
) -> Result<()> {
    for _ in 0..config.inner_iters {
        let (loss, grads, brackets) =
            dpo_gradients(&pair_state.target, &pair_state.reference, batch, beta_eff)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: "dpo loss became non-finite".to_string(),
            });
        }
        let implicit_accuracy =
            brackets.iter().filter(|&&b| b < 0.0).count() as f64 / brackets.len() as f64;
        log.push(AlignLogRecord {
            step,
            loss,
            implicit_accuracy,
            lr: config.lr,
        });
        opt.step(&mut pair_state.target.net.params, &grads, &pair_state.freeze);
    }
    Ok(())
}

/// Online alignment: the frozen reference generates candidates on the fly,
/// the scorer ranks them, and pair selection plus stepping proceed exactly
/// as offline.
pub fn align_online(
    prompts: &[PromptSpec],
    base: &Generator,
    scorer: &Scorer,
    gt: &GtLookup,
    config: &AlignmentConfig,
) -> Result<AlignOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Contract("online alignment needs prompts".to_string()));
    }
    let mut pair_state = RefTargetPair::from_base(base, config.freeze_policy)?;
    let reference_hash = pair_state
        .reference
        .to_checkpoint(BTreeMap::new())?
        .hash()
        .to_string();

    let dim = base.state_dim();
    let beta_eff = config.beta_eff(base.sched.t_max());
    let mut opt = Optimizer::sgd(config.lr, config.momentum);
    let mut pair_rng = derived_rng(config.seed, "align-pair", 0);
    let mut noise_rng = derived_rng(config.seed, "align-noise", 0);
    let mut log = Vec::with_capacity(config.steps);

    let tokens_all: Vec<TokenSeq> = prompts.iter().map(crate::domain::render_tokens).collect();
    let mut gt_states: BTreeMap<u64, Array1<f64>> = BTreeMap::new();
    if config.gt_p > 0.0 {
        for p in prompts {
            let m = gt.get(&p.prompt_id).ok_or_else(|| {
                Error::Contract(format!("missing ground truth for prompt {}", p.prompt_id))
            })?;
            gt_states.insert(p.prompt_id, pair_state.reference.encode_state(m)?);
        }
    }

    for step in 0..config.steps {
        let mut winner_states = Array2::<f64>::zeros((config.batch, dim));
        let mut loser_states = Array2::<f64>::zeros((config.batch, dim));
        let mut ids = Vec::with_capacity(config.batch);
        for b in 0..config.batch {
            let pi = pair_rng.gen_range(0..prompts.len());
            let prompt = &prompts[pi];
            let gen_seed = derive_seed(
                config.seed,
                "online-gen",
                (step * config.batch + b) as u64,
            );
            let motions = pair_state
                .reference
                .sample_batch(&tokens_all[pi], config.online_k, gen_seed)?;
            let tags = vec![tag_for_space(base.space); motions.len()];
            let ranked = crate::ranker::rank(prompt, motions, tags, scorer)?;
            let (w_rank, l_rank) =
                selection_ranks(ranked.len(), config.selection, Some(&mut pair_rng))?;
            let w_state = if gt_roll(config.gt_p, &mut pair_rng)? {
                gt_states
                    .get(&prompt.prompt_id)
                    .expect("prefetched above")
                    .clone()
            } else {
                pair_state
                    .reference
                    .encode_state(ranked.motion_at_rank(w_rank))?
            };
            let l_state = pair_state
                .reference
                .encode_state(ranked.motion_at_rank(l_rank))?;
            winner_states.row_mut(b).assign(&w_state);
            loser_states.row_mut(b).assign(&l_state);
            ids.push(token_ids(&tokens_all[pi]));
        }
        let ts: Vec<usize> = (0..config.batch)
            .map(|_| noise_rng.gen_range(1..=base.sched.t_max()))
            .collect();
        let eps_w = Array2::from_shape_fn((config.batch, dim), |_| {
            StandardNormal.sample(&mut noise_rng)
        });
        let eps_l = Array2::from_shape_fn((config.batch, dim), |_| {
            StandardNormal.sample(&mut noise_rng)
        });
        let batch = PairBatch {
            winner_states,
            loser_states,
            ids,
            ts,
            eps_w,
            eps_l,
        };
        step_once(
            &mut pair_state,
            &batch,
            beta_eff,
            &mut opt,
            config,
            step,
            &mut log,
        )?;
    }

    let after_hash = pair_state
        .reference
        .to_checkpoint(BTreeMap::new())?
        .hash()
        .to_string();
    if after_hash != reference_hash {
        return Err(Error::Contract(
            "reference checkpoint changed during online alignment".to_string(),
        ));
    }
    Ok(AlignOutcome {
        aligned: pair_state.target,
        log,
        reference_hash,
    })
}

fn tag_for_space(space: SpaceKind) -> crate::ranker::GeneratorTag {
    match space {
        SpaceKind::Raw => crate::ranker::GeneratorTag::Raw,
        SpaceKind::Latent => crate::ranker::GeneratorTag::Latent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        init_denoiser, make_schedule, DenoiserStructure, ScheduleKind,
    };
    use crate::domain::{build_dataset, DomainConfig};
    use crate::nn::max_rel_grad_error;
    use crate::pam::build_pam;
    use crate::ranker::GeneratorTag;
    use crate::vae::{init_vae, VaeStructure};

    const FRAMES: usize = 12;

    fn domain() -> DomainConfig {
        DomainConfig {
            frames: FRAMES,
            f_min: 8,
            f_max: 24,
            n_prompts: 40,
            ..Default::default()
        }
    }

    /// Small latent-family generator over an untrained VAE and denoiser;
    /// enough structure for mechanical alignment tests.
    fn latent_generator(seed: u64) -> (Generator, crate::domain::DatasetSplits) {
        let splits = build_dataset(40, 3, &domain()).unwrap();
        let vae = init_vae(
            VaeStructure {
                latent_dim: 6,
                hidden: 16,
                frames: FRAMES,
                fps: 20,
                f_min: 8,
                f_max: 24,
            },
            derive_seed(seed, "vae", 0),
        );
        let net = init_denoiser(
            DenoiserStructure {
                state_dim: 6,
                hidden: vec![12, 12],
                cond_dim: 6,
                time_dim: 4,
                vocab: crate::domain::vocab_size(),
                t_max: 8,
            },
            derive_seed(seed, "net", 0),
        );
        let sched = make_schedule(ScheduleKind::Linear, 8, 1e-3, 0.2).unwrap();
        let generator = Generator {
            net,
            sched,
            space: SpaceKind::Latent,
            vae: Some(vae),
            norm_stats: splits.norm_stats().clone(),
            frames: FRAMES,
            fps: 20,
        };
        (generator, splits)
    }

    fn raw_generator(seed: u64) -> Generator {
        let splits = build_dataset(40, 3, &domain()).unwrap();
        let dim = FRAMES * crate::domain::FEATURE_COUNT;
        let net = init_denoiser(
            DenoiserStructure {
                state_dim: dim,
                hidden: vec![16, 16],
                cond_dim: 6,
                time_dim: 4,
                vocab: crate::domain::vocab_size(),
                t_max: 8,
            },
            derive_seed(seed, "net", 0),
        );
        let sched = make_schedule(ScheduleKind::Linear, 8, 1e-3, 0.2).unwrap();
        Generator {
            net,
            sched,
            space: SpaceKind::Raw,
            vae: None,
            norm_stats: splits.norm_stats().clone(),
            frames: FRAMES,
            fps: 20,
        }
    }

    fn small_pam(generator: &Generator, splits: &crate::domain::DatasetSplits) -> PamDataset {
        let prompts: Vec<PromptSpec> = splits.train.records[..4].iter().map(|(p, _)| *p).collect();
        build_pam(
            &[(GeneratorTag::Latent, generator)],
            &prompts,
            3,
            &Scorer::Oracle,
            9,
        )
        .unwrap()
    }

    fn gt_lookup(splits: &crate::domain::DatasetSplits) -> GtLookup {
        splits
            .train
            .records
            .iter()
            .map(|(p, m)| (p.prompt_id, m.clone()))
            .collect()
    }

    fn sample_pair(pam: &PamDataset) -> PreferencePair {
        crate::pam::select_pair_edge(&pam.entries[0].ranked).unwrap()
    }

    #[test]
    fn loss_at_reference_is_ln_two_exactly() {
        let (generator, splits) = latent_generator(5);
        let pam = small_pam(&generator, &splits);
        let pair = sample_pair(&pam);
        let dim = generator.state_dim();
        let mut rng = crate::seeding::rng_from_seed(3);
        for t in [1, 4, 8] {
            let eps_w = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
            let eps_l = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
            let loss =
                dpo_diffusion_loss(&generator, &generator, &pair, t, &eps_w, &eps_l, 40.0)
                    .unwrap();
            assert!(
                (loss - std::f64::consts::LN_2).abs() < 1e-12,
                "t={t}: loss {loss}"
            );
        }
    }

    #[test]
    fn stub_bracket_matches_independent_logistic_evaluation() {
        // bracket = -2 with beta_eff = 1.
        let loss = dpo_loss_from_errors(0.5, 1.5, 2.0, 1.0, 1.0);
        // Independently: -ln(sigmoid(2)) = ln(1 + e^-2).
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn loss_is_monotone_in_branch_errors() {
        let beta = 2.0;
        let base = dpo_loss_from_errors(1.0, 0.8, 1.2, 0.9, beta);
        // Raising the target's winner-denoising error raises the loss.
        for d in [0.01, 0.1, 0.5] {
            assert!(dpo_loss_from_errors(1.0 + d, 0.8, 1.2, 0.9, beta) > base);
        }
        // Raising the target's loser-denoising error lowers the loss.
        for d in [0.01, 0.1, 0.5] {
            assert!(dpo_loss_from_errors(1.0, 0.8, 1.2 + d, 0.9, beta) < base);
        }
    }

    #[test]
    fn dpo_gradients_match_finite_differences() {
        let (generator, splits) = latent_generator(7);
        let pam = small_pam(&generator, &splits);
        let dim = generator.state_dim();
        let mut rng = crate::seeding::rng_from_seed(13);
        let entry = &pam.entries[0];
        let w = generator.encode_state(entry.ranked.motion_at_rank(0)).unwrap();
        let l = generator
            .encode_state(entry.ranked.motion_at_rank(entry.ranked.len() - 1))
            .unwrap();
        let batch = PairBatch {
            winner_states: ndarray::stack![Axis(0), w, w],
            loser_states: ndarray::stack![Axis(0), l, l],
            ids: vec![token_ids(&entry.ranked.tokens); 2],
            ts: vec![2, 7],
            eps_w: Array2::from_shape_fn((2, dim), |_| StandardNormal.sample(&mut rng)),
            eps_l: Array2::from_shape_fn((2, dim), |_| StandardNormal.sample(&mut rng)),
        };
        let beta_eff = 40.0;
        let reference = generator.clone();
        let (_, grads, _) = dpo_gradients(&generator, &reference, &batch, beta_eff).unwrap();

        let loss = |p: &crate::nn::ParamSet| {
            let mut candidate = generator.clone();
            candidate.net.params = p.clone();
            dpo_batch_loss(&candidate, &reference, &batch, beta_eff).unwrap()
        };
        let err = max_rel_grad_error(&generator.net.params, &grads, loss, 60, 31);
        assert!(err <= 1e-4, "max rel error {err}");
    }

    #[test]
    fn reference_parameters_receive_no_gradient() {
        // The reference branch is computed outside the tape, so its
        // parameters cannot appear in the gradient map of the target; a
        // perturbed reference changes the loss but never the target grads'
        // structure. Verify the loss changes while gradient names stay the
        // target's.
        let (generator, splits) = latent_generator(11);
        let pam = small_pam(&generator, &splits);
        let pair = sample_pair(&pam);
        let dim = generator.state_dim();
        let eps_w = Array1::zeros(dim);
        let eps_l = Array1::ones(dim);
        let mut reference = generator.clone();
        let l0 = dpo_diffusion_loss(&generator, &reference, &pair, 3, &eps_w, &eps_l, 40.0)
            .unwrap();
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-12);
        // Perturb the reference only: loss moves away from ln 2.
        reference.net.params.get_mut("trunk.l0.w")[[0, 0]] += 0.5;
        let l1 = dpo_diffusion_loss(&generator, &reference, &pair, 3, &eps_w, &eps_l, 40.0)
            .unwrap();
        assert!((l1 - std::f64::consts::LN_2).abs() > 1e-9);
    }

    #[test]
    fn freeze_policies_partition_parameters() {
        let (latent, _) = latent_generator(15);
        let mask = apply_freeze(&latent, FreezePolicy::DenoiserOnly).unwrap();
        assert_eq!(mask.n_frozen(), 0); // VAE params live outside the net

        let raw = raw_generator(15);
        assert!(matches!(
            apply_freeze(&raw, FreezePolicy::DenoiserOnly).unwrap_err(),
            Error::Config(_)
        ));

        let mask = apply_freeze(&raw, FreezePolicy::LastLayers(1)).unwrap();
        // 3 trunk layers; the last one trains, everything else frozen.
        assert!(mask.is_frozen("embed.w"));
        assert!(mask.is_frozen("trunk.l0.w"));
        assert!(mask.is_frozen("trunk.l1.w"));
        assert!(!mask.is_frozen("trunk.l2.w"));
        assert!(!mask.is_frozen("trunk.l2.b"));

        assert!(matches!(
            apply_freeze(&raw, FreezePolicy::LastLayers(9)).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn zero_steps_leaves_target_equal_to_reference() {
        let (generator, splits) = latent_generator(17);
        let pam = small_pam(&generator, &splits);
        let cfg = AlignmentConfig {
            steps: 0,
            batch: 4,
            seed: 1,
            ..Default::default()
        };
        let out = align_offline(&pam, &gt_lookup(&splits), &generator, &cfg).unwrap();
        assert!(out.aligned.net.params.bitwise_eq(&generator.net.params));
        assert!(out.log.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_aligned_checkpoints() {
        let (generator, splits) = latent_generator(19);
        let pam = small_pam(&generator, &splits);
        let cfg = AlignmentConfig {
            steps: 8,
            batch: 4,
            seed: 5,
            ..Default::default()
        };
        let gt = gt_lookup(&splits);
        let a = align_offline(&pam, &gt, &generator, &cfg).unwrap();
        let b = align_offline(&pam, &gt, &generator, &cfg).unwrap();
        assert!(a.aligned.net.params.bitwise_eq(&b.aligned.net.params));
        let cfg2 = AlignmentConfig { seed: 6, ..cfg };
        let c = align_offline(&pam, &gt, &generator, &cfg2).unwrap();
        assert!(!a.aligned.net.params.bitwise_eq(&c.aligned.net.params));
    }

    #[test]
    fn first_step_descends_below_ln_two() {
        let (generator, splits) = latent_generator(21);
        let pam = small_pam(&generator, &splits);
        let cfg = AlignmentConfig {
            steps: 1,
            batch: 8,
            lr: 1e-4,
            momentum: 0.0,
            seed: 3,
            ..Default::default()
        };
        let out = align_offline(&pam, &gt_lookup(&splits), &generator, &cfg).unwrap();
        // At initialization the loss is exactly ln 2; after one gradient
        // step on the same pairs it must drop. Replay the same batch draw.
        assert!((out.log[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
        let cfg2 = AlignmentConfig { steps: 2, ..cfg };
        let out2 = align_offline(&pam, &gt_lookup(&splits), &generator, &cfg2).unwrap();
        // Not the same batch at step 2, but the loss stays near/below ln 2
        // on average once descent starts; check the first recorded step
        // after the update is below ln 2 + small slack.
        assert!(out2.log[1].loss < std::f64::consts::LN_2 + 1e-3);
    }

    #[test]
    fn gt_substitution_requires_ground_truth() {
        let (generator, splits) = latent_generator(23);
        let pam = small_pam(&generator, &splits);
        let cfg = AlignmentConfig {
            steps: 1,
            batch: 2,
            gt_p: 0.5,
            seed: 3,
            ..Default::default()
        };
        let empty = GtLookup::new();
        assert!(matches!(
            align_offline(&pam, &empty, &generator, &cfg).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn frozen_params_stay_bitwise_identical_under_last_layers() {
        let raw = raw_generator(25);
        let splits = build_dataset(40, 3, &domain()).unwrap();
        let prompts: Vec<PromptSpec> =
            splits.train.records[..3].iter().map(|(p, _)| *p).collect();
        let pam = build_pam(
            &[(GeneratorTag::Raw, &raw)],
            &prompts,
            3,
            &Scorer::Oracle,
            9,
        )
        .unwrap();
        let cfg = AlignmentConfig {
            steps: 6,
            batch: 4,
            freeze_policy: FreezePolicy::LastLayers(1),
            seed: 7,
            ..Default::default()
        };
        let out = align_offline(&pam, &gt_lookup(&splits), &raw, &cfg).unwrap();
        let mask = apply_freeze(&raw, FreezePolicy::LastLayers(1)).unwrap();
        for name in mask.frozen_names() {
            let a = out.aligned.net.params.get(name);
            let b = raw.net.params.get(name);
            assert!(
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} changed"
            );
        }
        // And the trainable layer did change.
        let a = out.aligned.net.params.get("trunk.l2.w");
        let b = raw.net.params.get("trunk.l2.w");
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()));
    }

    #[test]
    fn online_alignment_leaves_reference_untouched_and_reproduces_logs() {
        let (generator, splits) = latent_generator(27);
        let prompts: Vec<PromptSpec> =
            splits.train.records[..3].iter().map(|(p, _)| *p).collect();
        let cfg = AlignmentConfig {
            steps: 3,
            batch: 2,
            online: true,
            online_k: 2, // selection degenerates to the only pair
            seed: 11,
            ..Default::default()
        };
        let gt = gt_lookup(&splits);
        let a = align_online(&prompts, &generator, &Scorer::Oracle, &gt, &cfg).unwrap();
        let b = align_online(&prompts, &generator, &Scorer::Oracle, &gt, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.log).unwrap(),
            serde_json::to_string(&b.log).unwrap()
        );
        let base_hash = generator
            .to_checkpoint(BTreeMap::new())
            .unwrap()
            .hash()
            .to_string();
        assert_eq!(a.reference_hash, base_hash);
        assert!(a.aligned.net.params != generator.net.params || cfg.steps == 0);
    }
}

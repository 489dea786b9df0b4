//! DDPM machinery: noise schedules, the closed-form forward process, a
//! conditioned epsilon-predicting denoiser, training, and ancestral
//! sampling.
//!
//! The same code drives two generator instances: one diffusing raw motion
//! features (flattened F x V) and one diffusing VAE latents. The reverse
//! step uses the epsilon-parameterized posterior mean with variance beta_t.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::domain::{MotionSequence, NormStats, TokenSeq, FEATURE_COUNT};
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_mlp, ParamSet, TapeBinding};
use crate::opt::{FreezeMask, Optimizer, OptimizerKind};
use crate::seeding::{derive_seed, derived_rng, rng_from_seed};
use crate::vae::{LatentVector, VaeModel};

/// Supported beta schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Variance schedule with derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Check the structural invariants: entries in (0,1), strictly
    /// decreasing cumulative product, and derived arrays consistent with
    /// the betas.
    pub fn validate(&self) -> Result<()> {
        let t = self.t_max();
        if t == 0 {
            return Err(Error::Config("schedule must have at least one step".to_string()));
        }
        let mut prod = 1.0;
        for i in 0..t {
            let b = self.betas[i];
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("beta[{i}] = {b} outside (0,1)")));
            }
            if (self.alphas[i] - (1.0 - b)).abs() > 1e-12 {
                return Err(Error::Config(format!("alpha[{i}] inconsistent with beta")));
            }
            prod *= self.alphas[i];
            if (self.alpha_bars[i] - prod).abs() > 1e-12 {
                return Err(Error::Config(format!("alpha_bar[{i}] inconsistent")));
            }
            if i > 0 && self.alpha_bars[i] >= self.alpha_bars[i - 1] {
                return Err(Error::Config("alpha_bar must decrease strictly".to_string()));
            }
        }
        Ok(())
    }
}

/// Build a schedule. Linear spaces betas evenly in `[beta_min, beta_max]`;
/// cosine derives betas from the squared-cosine cumulative curve and clamps
/// them into `[beta_min, beta_max]`, then recomputes the cumulative product
/// so the derived arrays stay consistent.
pub fn make_schedule(
    kind: ScheduleKind,
    t: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t < 1 {
        return Err(Error::Config("T must be >= 1".to_string()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta bounds [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t)
            .map(|i| {
                if t == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |x: f64| ((x / t as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            (1..=t)
                .map(|i| {
                    let bar_prev = f((i - 1) as f64) / f0;
                    let bar = f(i as f64) / f0;
                    (1.0 - bar / bar_prev).clamp(beta_min, beta_max)
                })
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let sched = NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    };
    sched.validate()?;
    Ok(sched)
}

/// Closed-form forward marginal: `x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::Contract(format!(
            "t = {t} outside [1, {}]",
            sched.t_max()
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Contract("eps shape must match x0".to_string()));
    }
    let ab = sched.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Which state space a generator diffuses in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Raw,
    Latent,
}

/// Structural description of a denoiser network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserStructure {
    pub state_dim: usize,
    /// Hidden widths of the trunk MLP.
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub vocab: usize,
    pub t_max: usize,
}

impl DenoiserStructure {
    pub fn trunk_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.state_dim + self.time_dim + self.cond_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.state_dim);
        sizes
    }

    pub fn n_trunk_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Where a parameter sits in the denoiser: the conditioning embedder or a
/// trunk layer (by index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Embedder,
    Trunk(usize),
}

/// Epsilon-predicting denoiser with token conditioning and a sinusoidal
/// timestep embedding.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub params: ParamSet,
    pub structure: DenoiserStructure,
}

pub fn init_denoiser(structure: DenoiserStructure, seed: u64) -> DenoiserNet {
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    init_linear(&mut params, "embed", structure.vocab, structure.cond_dim, &mut rng);
    // The embedder bias is unused; drop it to keep the partition clean.
    let mut cleaned = ParamSet::new();
    for (name, v) in params.iter() {
        if name != "embed.b" {
            cleaned.insert(name, v.clone());
        }
    }
    let mut params = cleaned;
    init_mlp(&mut params, "trunk", &structure.trunk_sizes(), &mut rng);
    DenoiserNet { params, structure }
}

/// Sinusoidal embedding of a (1-based) timestep.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Vec<f64> {
    let tau = t as f64 / t_max as f64;
    let mut out = Vec::with_capacity(dim);
    let pairs = dim / 2;
    for j in 0..pairs {
        let freq = std::f64::consts::PI * 2f64.powi(j as i32);
        out.push((freq * tau).sin());
        out.push((freq * tau).cos());
    }
    while out.len() < dim {
        out.push(tau);
    }
    out
}

impl DenoiserNet {
    /// Role of every named parameter; each appears exactly once.
    pub fn layer_partition(&self) -> Vec<(String, LayerRole)> {
        self.params
            .iter()
            .map(|(name, _)| {
                let role = if name.starts_with("embed") {
                    LayerRole::Embedder
                } else {
                    let layer: usize = name
                        .trim_start_matches("trunk.l")
                        .split('.')
                        .next()
                        .and_then(|s| s.parse().ok())
                        .expect("trunk layer index");
                    LayerRole::Trunk(layer)
                };
                (name.to_string(), role)
            })
            .collect()
    }

    /// Mean-pooled token embedding rows (plain path; matches the tape op
    /// bitwise: sum in list order, then scale by 1/len).
    fn pool_tokens_plain(&self, ids: &[Vec<usize>]) -> Array2<f64> {
        let table = self.params.get("embed.w");
        let d = self.structure.cond_dim;
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

    fn time_rows(&self, ts: &[usize]) -> Array2<f64> {
        let dim = self.structure.time_dim;
        let mut out = Array2::<f64>::zeros((ts.len(), dim));
        for (i, &t) in ts.iter().enumerate() {
            let e = time_embedding(t, self.structure.t_max, dim);
            for j in 0..dim {
                out[[i, j]] = e[j];
            }
        }
        out
    }

    /// Plain forward pass: predicted noise for a batch of states.
    /// `cond_on[i] = false` zeroes the pooled condition for that row.
    pub fn forward_plain(
        &self,
        states: &Array2<f64>,
        ts: &[usize],
        ids: &[Vec<usize>],
        cond_on: Option<&[bool]>,
    ) -> Result<Array2<f64>> {
        let b = states.nrows();
        if states.ncols() != self.structure.state_dim {
            return Err(Error::Contract(format!(
                "state dim {} != {}",
                states.ncols(),
                self.structure.state_dim
            )));
        }
        if ts.len() != b || ids.len() != b {
            return Err(Error::Contract("batch length mismatch".to_string()));
        }
        let mut cond = self.pool_tokens_plain(ids);
        if let Some(mask) = cond_on {
            for (i, &on) in mask.iter().enumerate() {
                if !on {
                    cond.row_mut(i).fill(0.0);
                }
            }
        }
        let time = self.time_rows(ts);
        let mut input = Array2::<f64>::zeros((b, states.ncols() + time.ncols() + cond.ncols()));
        input
            .slice_mut(ndarray::s![.., ..states.ncols()])
            .assign(states);
        input
            .slice_mut(ndarray::s![.., states.ncols()..states.ncols() + time.ncols()])
            .assign(&time);
        input
            .slice_mut(ndarray::s![.., states.ncols() + time.ncols()..])
            .assign(&cond);
        Ok(crate::nn::mlp_forward_plain(
            &self.params,
            "trunk",
            self.structure.n_trunk_layers(),
            &input,
        ))
    }

    /// Tape forward pass mirroring [`Self::forward_plain`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        states: Var,
        ts: &[usize],
        ids: &[Vec<usize>],
        cond_on: Option<&[bool]>,
    ) -> Var {
        let b = ts.len();
        let table = binding.var("embed.w");
        let pooled = tape.embed_mean(table, ids.to_vec());
        let cond = match cond_on {
            Some(mask) => {
                let mut m = Array2::<f64>::zeros((b, self.structure.cond_dim));
                for (i, &on) in mask.iter().enumerate() {
                    if on {
                        m.row_mut(i).fill(1.0);
                    }
                }
                let mask_leaf = tape.leaf(m);
                tape.mul(pooled, mask_leaf)
            }
            None => pooled,
        };
        let time = tape.leaf(self.time_rows(ts));
        let input = tape.concat_cols(&[states, time, cond]);
        crate::nn::mlp_forward_tape(
            tape,
            binding,
            "trunk",
            self.structure.n_trunk_layers(),
            input,
        )
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        meta.insert(
            "structure".to_string(),
            serde_json::to_string(&self.structure)?,
        );
        Ok(Checkpoint::from_params("denoiser", &self.params, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DenoiserNet> {
        if ckpt.kind != "denoiser" && ckpt.kind != "generator" {
            return Err(Error::Contract(format!(
                "expected denoiser checkpoint, got {}",
                ckpt.kind
            )));
        }
        let structure: DenoiserStructure = serde_json::from_str(
            ckpt.meta
                .get("structure")
                .ok_or_else(|| Error::Integrity("checkpoint missing structure".to_string()))?,
        )?;
        Ok(DenoiserNet {
            params: ckpt.params()?,
            structure,
        })
    }
}

/// Convert token sequences to embedder id lists.
pub fn token_ids(tokens: &TokenSeq) -> Vec<usize> {
    tokens.tokens.iter().map(|&t| t as usize).collect()
}

struct DdpmTape {
    tape: Tape,
    binding: TapeBinding,
    loss: Var,
}

fn build_ddpm_tape(
    net: &DenoiserNet,
    x0: &Array2<f64>,
    ids: &[Vec<usize>],
    ts: &[usize],
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
    cond_on: Option<&[bool]>,
) -> Result<DdpmTape> {
    let b = x0.nrows();
    if eps.shape() != x0.shape() || ts.len() != b || ids.len() != b {
        return Err(Error::Contract("ddpm batch shape mismatch".to_string()));
    }
    // Noised inputs are constants with respect to the parameters.
    let mut xt = Array2::<f64>::zeros(x0.raw_dim());
    for i in 0..b {
        let row =
            q_sample(&x0.row(i).insert_axis(ndarray::Axis(0)).to_owned(), ts[i], &eps.row(i).insert_axis(ndarray::Axis(0)).to_owned(), sched)?;
        xt.row_mut(i).assign(&row.row(0));
    }
    let mut tape = Tape::new();
    let binding = TapeBinding::bind(&mut tape, &net.params);
    let xt_leaf = tape.leaf(xt);
    let pred = net.forward_tape(&mut tape, &binding, xt_leaf, ts, ids, cond_on);
    let eps_leaf = tape.leaf(eps.clone());
    let diff = tape.sub(eps_leaf, pred);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    Ok(DdpmTape { tape, binding, loss })
}

/// Denoising loss: `||eps - eps_hat(q_sample(x0,t,eps), t, c)||^2` averaged
/// over all elements of the batch.
pub fn ddpm_loss(
    net: &DenoiserNet,
    x0: &Array2<f64>,
    conds: &[TokenSeq],
    ts: &[usize],
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let ids: Vec<Vec<usize>> = conds.iter().map(token_ids).collect();
    let t = build_ddpm_tape(net, x0, &ids, ts, eps, sched, None)?;
    let v = t.tape.scalar(t.loss);
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite ddpm loss".to_string()));
    }
    Ok(v)
}

/// Analytic gradients of [`ddpm_loss`] for verification.
pub fn ddpm_gradients(
    net: &DenoiserNet,
    x0: &Array2<f64>,
    conds: &[TokenSeq],
    ts: &[usize],
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<crate::nn::ParamGrads> {
    let ids: Vec<Vec<usize>> = conds.iter().map(token_ids).collect();
    let t = build_ddpm_tape(net, x0, &ids, ts, eps, sched, None)?;
    let node_grads = t.tape.backward(t.loss);
    Ok(t.binding.grads(&net.params, &node_grads))
}

/// Diffusion training configuration (one per space).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleKind,
    pub t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub cond_dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule: ScheduleKind::Linear,
            t: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
            hidden: vec![128, 128],
            cond_dim: 16,
            time_dim: 8,
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            cond_dropout: 0.1,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.hidden.is_empty() {
            return Err(Error::Config("diffusion batch/hidden invalid".to_string()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout outside [0,1]".to_string()));
        }
        make_schedule(self.schedule, self.t, self.beta_min, self.beta_max)?;
        Ok(())
    }
}

/// Training inputs: one state row per record plus its condition tokens.
pub struct DiffusionTrainData {
    pub states: Array2<f64>,
    pub conds: Vec<TokenSeq>,
}

/// One line of the diffusion training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiffusionLossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Train a denoiser on pre-encoded states. Timesteps are uniform in
/// `[1, T]` with fresh noise per example; conditions drop out with the
/// configured probability so an unconditional path stays available.
pub fn train_diffusion(
    data: &DiffusionTrainData,
    config: &DiffusionConfig,
    seed: u64,
) -> Result<(DenoiserNet, NoiseSchedule, Vec<DiffusionLossRecord>)> {
    config.validate()?;
    let n = data.states.nrows();
    if n == 0 || data.conds.len() != n {
        return Err(Error::Contract("diffusion train data mismatch".to_string()));
    }
    let sched = make_schedule(config.schedule, config.t, config.beta_min, config.beta_max)?;
    let structure = DenoiserStructure {
        state_dim: data.states.ncols(),
        hidden: config.hidden.clone(),
        cond_dim: config.cond_dim,
        time_dim: config.time_dim,
        vocab: crate::domain::vocab_size(),
        t_max: config.t,
    };
    let mut net = init_denoiser(structure, derive_seed(seed, "diff-init", 0));
    let ids_all: Vec<Vec<usize>> = data.conds.iter().map(token_ids).collect();

    let mut opt = Optimizer::new(config.optimizer, config.lr, 0.9);
    let mut order_rng = derived_rng(seed, "diff-batch", 0);
    let mut noise_rng = derived_rng(seed, "diff-noise", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = Vec::with_capacity(config.steps);
    let dim = data.states.ncols();

    for step in 0..config.steps {
        let mut x0 = Array2::<f64>::zeros((config.batch, dim));
        let mut ids = Vec::with_capacity(config.batch);
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
            x0.row_mut(b).assign(&data.states.row(rec));
            ids.push(ids_all[rec].clone());
        }
        let ts: Vec<usize> = (0..config.batch)
            .map(|_| noise_rng.gen_range(1..=config.t))
            .collect();
        let eps = Array2::from_shape_fn((config.batch, dim), |_| {
            StandardNormal.sample(&mut noise_rng)
        });
        let cond_on: Vec<bool> = (0..config.batch)
            .map(|_| noise_rng.gen_range(0.0..1.0) >= config.cond_dropout)
            .collect();

        let t = build_ddpm_tape(&net, &x0, &ids, &ts, &eps, &sched, Some(&cond_on))?;
        let loss = t.tape.scalar(t.loss);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: "ddpm loss became non-finite".to_string(),
            });
        }
        history.push(DiffusionLossRecord { step, loss });
        let node_grads = t.tape.backward(t.loss);
        let grads = t.binding.grads(&net.params, &node_grads);
        opt.step(&mut net.params, &grads, &FreezeMask::none());
    }

    Ok((net, sched, history))
}

/// Ancestral sampler over raw state vectors. Each sample row consumes an
/// independent noise stream derived from `seed`, so batched and one-by-one
/// sampling produce identical results.
pub fn sample_states(
    net: &DenoiserNet,
    tokens: &TokenSeq,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let dim = net.structure.state_dim;
    let t_max = sched.t_max();
    let mut rngs: Vec<_> = (0..n)
        .map(|i| rng_from_seed(derive_seed(seed, "sample", i as u64)))
        .collect();
    let mut x = Array2::<f64>::zeros((n, dim));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..dim {
            x[[i, j]] = StandardNormal.sample(rng);
        }
    }
    let ids = vec![token_ids(tokens); n];
    for t in (1..=t_max).rev() {
        let ts = vec![t; n];
        let pred = net.forward_plain(&x, &ts, &ids, None)?;
        let beta = sched.beta(t);
        let alpha = sched.alpha(t);
        let ab = sched.alpha_bar(t);
        let coef = beta / (1.0 - ab).sqrt();
        let scale = 1.0 / alpha.sqrt();
        for i in 0..n {
            for j in 0..dim {
                x[[i, j]] = scale * (x[[i, j]] - coef * pred[[i, j]]);
            }
        }
        if t > 1 {
            let sd = beta.sqrt();
            for (i, rng) in rngs.iter_mut().enumerate() {
                for j in 0..dim {
                    let z: f64 = StandardNormal.sample(rng);
                    x[[i, j]] += sd * z;
                }
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite state".to_string()));
    }
    Ok(x)
}

/// A trained generator: denoiser + schedule + the pieces needed to turn
/// sampled states back into raw-unit motions.
#[derive(Debug, Clone)]
pub struct Generator {
    pub net: DenoiserNet,
    pub sched: NoiseSchedule,
    pub space: SpaceKind,
    pub vae: Option<VaeModel>,
    pub norm_stats: NormStats,
    pub frames: usize,
    pub fps: u32,
}

impl Generator {
    /// Decode one sampled state row into a raw-unit motion.
    fn state_to_motion(&self, state: &Array1<f64>) -> Result<MotionSequence> {
        let normalized = match self.space {
            SpaceKind::Raw => {
                let data = state
                    .clone()
                    .into_shape((self.frames, FEATURE_COUNT))
                    .map_err(|e| Error::Contract(e.to_string()))?;
                MotionSequence::new(data, self.fps)?
            }
            SpaceKind::Latent => {
                let vae = self
                    .vae
                    .as_ref()
                    .ok_or_else(|| Error::Config("latent space requires a VAE".to_string()))?;
                crate::vae::decode(&LatentVector { z: state.clone() }, self.frames, vae)?
            }
        };
        self.norm_stats.denormalize(&normalized)
    }

    /// Encode a raw-unit motion into this generator's state space.
    pub fn encode_state(&self, motion: &MotionSequence) -> Result<Array1<f64>> {
        let normalized = self.norm_stats.normalize_unbounded(motion)?;
        match self.space {
            SpaceKind::Raw => {
                let m = if normalized.frames() == self.frames {
                    normalized
                } else {
                    normalized.resample(self.frames)?
                };
                Ok(Array1::from_iter(m.data.iter().cloned()))
            }
            SpaceKind::Latent => {
                let vae = self
                    .vae
                    .as_ref()
                    .ok_or_else(|| Error::Config("latent space requires a VAE".to_string()))?;
                Ok(crate::vae::encode(&normalized, vae)?.mu)
            }
        }
    }

    /// Sample `n` motions for one condition; deterministic given the seed.
    pub fn sample_batch(
        &self,
        tokens: &TokenSeq,
        n: usize,
        seed: u64,
    ) -> Result<Vec<MotionSequence>> {
        let states = sample_states(&self.net, tokens, &self.sched, n, seed)?;
        (0..n)
            .map(|i| self.state_to_motion(&states.row(i).to_owned()))
            .collect()
    }

    /// Sample a single motion.
    pub fn sample_motion(&self, tokens: &TokenSeq, seed: u64) -> Result<MotionSequence> {
        Ok(self.sample_batch(tokens, 1, seed)?.remove(0))
    }

    pub fn state_dim(&self) -> usize {
        self.net.structure.state_dim
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        meta.insert(
            "structure".to_string(),
            serde_json::to_string(&self.net.structure)?,
        );
        meta.insert("schedule".to_string(), serde_json::to_string(&self.sched)?);
        meta.insert("space".to_string(), serde_json::to_string(&self.space)?);
        meta.insert(
            "norm_stats".to_string(),
            serde_json::to_string(&self.norm_stats)?,
        );
        meta.insert("frames".to_string(), self.frames.to_string());
        meta.insert("fps".to_string(), self.fps.to_string());
        Ok(Checkpoint::from_params("generator", &self.net.params, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, vae: Option<VaeModel>) -> Result<Generator> {
        if ckpt.kind != "generator" {
            return Err(Error::Contract(format!(
                "expected generator checkpoint, got {}",
                ckpt.kind
            )));
        }
        let get = |k: &str| -> Result<&String> {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Integrity(format!("generator checkpoint missing {k}")))
        };
        let structure: DenoiserStructure = serde_json::from_str(get("structure")?)?;
        let sched: NoiseSchedule = serde_json::from_str(get("schedule")?)?;
        let space: SpaceKind = serde_json::from_str(get("space")?)?;
        let norm_stats: NormStats = serde_json::from_str(get("norm_stats")?)?;
        let frames: usize = get("frames")?
            .parse()
            .map_err(|_| Error::Integrity("bad frames field".to_string()))?;
        let fps: u32 = get("fps")?
            .parse()
            .map_err(|_| Error::Integrity("bad fps field".to_string()))?;
        if space == SpaceKind::Latent && vae.is_none() {
            return Err(Error::Config(
                "latent generator requires a VAE checkpoint".to_string(),
            ));
        }
        Ok(Generator {
            net: DenoiserNet {
                params: ckpt.params()?,
                structure,
            },
            sched,
            space,
            vae,
            norm_stats,
            frames,
            fps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{render_tokens, Action, PromptSpec};
    use crate::nn::max_rel_grad_error;

    fn tokens() -> TokenSeq {
        let p = PromptSpec::new(Action::Walk, 1.0, 0.7, 0.0, 0).unwrap();
        render_tokens(&p)
    }

    fn tiny_net(state_dim: usize, t_max: usize, seed: u64) -> DenoiserNet {
        init_denoiser(
            DenoiserStructure {
                state_dim,
                hidden: vec![10],
                cond_dim: 6,
                time_dim: 4,
                vocab: crate::domain::vocab_size(),
                t_max,
            },
            seed,
        )
    }

    #[test]
    fn single_step_schedule_is_trivial() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas, vec![0.5]);
        assert_eq!(s.alpha_bars, vec![0.5]);
    }

    #[test]
    fn linear_schedule_alpha_bars_strictly_decrease() {
        let s = make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        for i in 1..100 {
            assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
        }
        assert!(s.alpha_bars[99] < s.alpha_bars[0]);
    }

    #[test]
    fn alpha_bars_match_independent_cumulative_product() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(kind, 50, 1e-3, 0.2).unwrap();
            // Second implementation: reverse-order product of alphas.
            for i in 0..50 {
                let mut prod = 1.0;
                for j in (0..=i).rev() {
                    prod *= 1.0 - s.betas[j];
                }
                assert!(
                    (prod - s.alpha_bars[i]).abs() <= 1e-12,
                    "step {i}: {prod} vs {}",
                    s.alpha_bars[i]
                );
            }
        }
    }

    #[test]
    fn invalid_bounds_are_config_errors() {
        assert!(matches!(
            make_schedule(ScheduleKind::Linear, 0, 0.1, 0.2).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            make_schedule(ScheduleKind::Linear, 10, 0.3, 0.2).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            make_schedule(ScheduleKind::Linear, 10, 0.0, 0.2).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn q_sample_noiseless_and_zero_signal_branches() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let x0 = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let zero = Array2::zeros((2, 3));
        for t in [1, 5, 10] {
            let ab = s.alpha_bar(t);
            let xt = q_sample(&x0, t, &zero, &s).unwrap();
            for (a, b) in xt.iter().zip(x0.iter()) {
                assert!((a - ab.sqrt() * b).abs() < 1e-15);
            }
            let e = Array2::from_shape_fn((2, 3), |(i, j)| (i as f64) - (j as f64) * 0.5);
            let xt = q_sample(&zero, t, &e, &s).unwrap();
            for (a, b) in xt.iter().zip(e.iter()) {
                assert!((a - (1.0 - ab).sqrt() * b).abs() < 1e-15);
            }
        }
        assert!(matches!(
            q_sample(&x0, 11, &zero, &s).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        let s = make_schedule(ScheduleKind::Linear, 20, 1e-3, 0.2).unwrap();
        let mut rng = crate::seeding::rng_from_seed(51);
        let n = 100_000;
        for t in [1, 10, 20] {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let x0: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                let xt = s.alpha_bar(t).sqrt() * x0 + (1.0 - s.alpha_bar(t)).sqrt() * e;
                sum += xt;
                sum_sq += xt * xt;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.02, "t={t}: var {var}");
        }
    }

    #[test]
    fn zero_net_loss_is_mean_eps_squared_and_zero_for_matching_eps() {
        let s = make_schedule(ScheduleKind::Linear, 8, 1e-3, 0.2).unwrap();
        let mut net = tiny_net(5, 8, 3);
        // Zero every trunk parameter: the net now predicts exactly zero.
        for name in net.params.names() {
            if name.starts_with("trunk") {
                net.params.get_mut(&name).fill(0.0);
            }
        }
        let x0 = Array2::from_shape_fn((3, 5), |(i, j)| 0.1 * (i as f64) - 0.2 * (j as f64));
        let conds = vec![tokens(); 3];
        let ts = vec![2, 5, 8];

        // eps = 0: prediction (0) matches eps exactly -> loss = 0.
        let zero_eps = Array2::zeros((3, 5));
        let loss = ddpm_loss(&net, &x0, &conds, &ts, &zero_eps, &s).unwrap();
        assert_eq!(loss, 0.0);

        // Random eps: zero predictor -> loss = mean(eps^2).
        let mut rng = crate::seeding::rng_from_seed(4);
        let eps = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let loss = ddpm_loss(&net, &x0, &conds, &ts, &eps, &s).unwrap();
        let expected = eps.mapv(|v| v * v).mean().unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ddpm_gradients_match_finite_differences() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let net = tiny_net(4, 10, 5);
        let mut rng = crate::seeding::rng_from_seed(6);
        let x0 = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let conds = vec![tokens(); 3];
        let ts = vec![1, 4, 10];
        let grads = ddpm_gradients(&net, &x0, &conds, &ts, &eps, &s).unwrap();
        let structure = net.structure.clone();
        let loss = |p: &ParamSet| {
            let candidate = DenoiserNet {
                params: p.clone(),
                structure: structure.clone(),
            };
            ddpm_loss(&candidate, &x0, &conds, &ts, &eps, &s).unwrap()
        };
        let err = max_rel_grad_error(&net.params, &grads, loss, 60, 23);
        assert!(err <= 1e-4, "max rel error {err}");
    }

    #[test]
    fn plain_and_tape_forwards_agree_bitwise() {
        let net = tiny_net(4, 10, 7);
        let mut rng = crate::seeding::rng_from_seed(8);
        let states = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let ids = vec![token_ids(&tokens()); 3];
        let ts = vec![3, 7, 9];
        let mask = vec![true, false, true];

        let plain = net.forward_plain(&states, &ts, &ids, Some(&mask)).unwrap();

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &net.params);
        let leaf = tape.leaf(states.clone());
        let out = net.forward_tape(&mut tape, &binding, leaf, &ts, &ids, Some(&mask));
        for (a, b) in plain.iter().zip(tape.value(out).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn train_data(n: usize, dim: usize, seed: u64) -> DiffusionTrainData {
        let mut rng = crate::seeding::rng_from_seed(seed);
        DiffusionTrainData {
            states: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0)),
            conds: (0..n)
                .map(|i| {
                    let p = PromptSpec::new(
                        Action::ALL[i % 5],
                        1.0 + 0.1 * ((i % 5) as f64),
                        0.5,
                        0.0,
                        i as u64,
                    )
                    .unwrap();
                    render_tokens(&p)
                })
                .collect(),
        }
    }

    fn tiny_config(steps: usize) -> DiffusionConfig {
        DiffusionConfig {
            t: 10,
            hidden: vec![12],
            cond_dim: 6,
            time_dim: 4,
            steps,
            batch: 8,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = train_data(20, 4, 1);
        let (net, _, hist) = train_diffusion(&data, &tiny_config(0), 9).unwrap();
        let init = init_denoiser(net.structure.clone(), derive_seed(9, "diff-init", 0));
        assert!(net.params.bitwise_eq(&init.params));
        assert!(hist.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let data = train_data(20, 4, 1);
        let (a, _, _) = train_diffusion(&data, &tiny_config(25), 9).unwrap();
        let (b, _, _) = train_diffusion(&data, &tiny_config(25), 9).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let ca = a.to_checkpoint(BTreeMap::new()).unwrap();
        let cb = b.to_checkpoint(BTreeMap::new()).unwrap();
        assert_eq!(ca.hash(), cb.hash());
    }

    #[test]
    fn smoothed_loss_decreases() {
        let data = train_data(40, 4, 2);
        let (_, _, hist) = train_diffusion(&data, &tiny_config(400), 9).unwrap();
        let early: f64 = hist[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let late: f64 = hist[hist.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        assert!(late < early, "late {late} vs early {early}");
    }

    #[test]
    fn sampling_is_seed_deterministic_and_seed_sensitive() {
        let net = tiny_net(4, 10, 11);
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let a = sample_states(&net, &tokens(), &s, 2, 77).unwrap();
        let b = sample_states(&net, &tokens(), &s, 2, 77).unwrap();
        assert_eq!(a, b);
        let c = sample_states(&net, &tokens(), &s, 2, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batched_sampling_matches_one_by_one() {
        let net = tiny_net(4, 10, 11);
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let batch = sample_states(&net, &tokens(), &s, 3, 55).unwrap();
        for i in 0..3 {
            // Row i of a batch uses the noise stream derived for index i;
            // replaying that stream one row at a time must reproduce it.
            let one = {
                let derived = derive_seed(55, "sample", i as u64);
                // A 1-row batch derives its row stream with index 0 from the
                // given seed, so reconstruct the row stream manually.
                let mut rng = rng_from_seed(derived);
                let dim = 4;
                let mut x = Array2::<f64>::zeros((1, dim));
                for j in 0..dim {
                    x[[0, j]] = StandardNormal.sample(&mut rng);
                }
                let ids = vec![token_ids(&tokens()); 1];
                for t in (1..=s.t_max()).rev() {
                    let pred = net.forward_plain(&x, &[t], &ids, None).unwrap();
                    let beta = s.beta(t);
                    let coef = beta / (1.0 - s.alpha_bar(t)).sqrt();
                    let scale = 1.0 / s.alpha(t).sqrt();
                    for j in 0..dim {
                        x[[0, j]] = scale * (x[[0, j]] - coef * pred[[0, j]]);
                    }
                    if t > 1 {
                        let sd = beta.sqrt();
                        for j in 0..dim {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            x[[0, j]] += sd * z;
                        }
                    }
                }
                x
            };
            for j in 0..4 {
                assert_eq!(batch[[i, j]].to_bits(), one[[0, j]].to_bits());
            }
        }
    }

    #[test]
    fn t_equals_one_sampling_is_a_single_denoise_step() {
        let net = tiny_net(4, 1, 13);
        let s = make_schedule(ScheduleKind::Linear, 1, 0.2, 0.2).unwrap();
        let out = sample_states(&net, &tokens(), &s, 1, 99).unwrap();

        // Reproduce by hand: one reverse step from pure noise, no added noise.
        let mut rng = rng_from_seed(derive_seed(99, "sample", 0));
        let mut x = Array2::<f64>::zeros((1, 4));
        for j in 0..4 {
            x[[0, j]] = StandardNormal.sample(&mut rng);
        }
        let ids = vec![token_ids(&tokens())];
        let pred = net.forward_plain(&x, &[1], &ids, None).unwrap();
        let coef = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
        let scale = 1.0 / s.alpha(1).sqrt();
        for j in 0..4 {
            let expected = scale * (x[[0, j]] - coef * pred[[0, j]]);
            assert_eq!(out[[0, j]].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn layer_partition_covers_every_parameter_once() {
        let net = tiny_net(4, 10, 15);
        let partition = net.layer_partition();
        assert_eq!(partition.len(), net.params.len());
        let names: std::collections::HashSet<_> =
            partition.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), partition.len());
        assert!(partition
            .iter()
            .any(|(_, r)| matches!(r, LayerRole::Embedder)));
        let max_trunk = partition
            .iter()
            .filter_map(|(_, r)| match r {
                LayerRole::Trunk(i) => Some(*i),
                _ => None,
            })
            .max()
            .unwrap();
        assert_eq!(max_trunk + 1, net.structure.n_trunk_layers());
    }
}

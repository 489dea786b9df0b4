//! Motion VAE: an encoder-decoder pair over flattened motion features,
//! trained on the evidence lower bound. Supplies the compact latent space
//! the latent diffusion generator runs in.
//!
//! Encoder and decoder are small MLPs over a fixed frame count; motions
//! with a different frame count are resampled on the way in and out. The
//! encoder emits a mean and a strictly positive std per latent dimension
//! (std goes through a clamped log-std followed by exp).

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::domain::{MotionDataset, MotionSequence, FEATURE_COUNT};
use crate::error::{Error, Result};
use crate::nn::{
    init_linear, init_mlp, mlp_forward_plain, mlp_forward_tape, ParamSet, TapeBinding,
};
use crate::opt::{FreezeMask, Optimizer, OptimizerKind};
use crate::seeding::{derive_seed, derived_rng, rng_from_seed};

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;

/// Training and architecture configuration for the VAE.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub kl_weight: f64,
    /// Fraction of steps over which the KL weight ramps from 0 to full.
    pub kl_warmup_frac: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 16,
            hidden: 64,
            steps: 4000,
            batch: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            kl_weight: 1e-3,
            kl_warmup_frac: 0.1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.batch == 0 {
            return Err(Error::Config("vae dims and batch must be positive".to_string()));
        }
        if self.kl_weight < 0.0 || !(0.0..=1.0).contains(&self.kl_warmup_frac) {
            return Err(Error::Config("invalid kl weight/warmup".to_string()));
        }
        Ok(())
    }
}

/// Shape metadata persisted alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VaeStructure {
    pub latent_dim: usize,
    pub hidden: usize,
    pub frames: usize,
    pub fps: u32,
    pub f_min: usize,
    pub f_max: usize,
}

impl VaeStructure {
    pub fn input_dim(&self) -> usize {
        self.frames * FEATURE_COUNT
    }
}

/// Encoder output: posterior mean and std per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub z: Array1<f64>,
}

/// Encoder + decoder weights plus structure.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub params: ParamSet,
    pub structure: VaeStructure,
}

pub fn init_vae(structure: VaeStructure, seed: u64) -> VaeModel {
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    let in_dim = structure.input_dim();
    init_mlp(&mut params, "enc.trunk", &[in_dim, structure.hidden], &mut rng);
    init_linear(&mut params, "enc.mu", structure.hidden, structure.latent_dim, &mut rng);
    init_linear(&mut params, "enc.logsig", structure.hidden, structure.latent_dim, &mut rng);
    init_mlp(
        &mut params,
        "dec",
        &[structure.latent_dim, structure.hidden, in_dim],
        &mut rng,
    );
    VaeModel { params, structure }
}

impl VaeModel {
    /// Flatten a normalized motion into a single input row, resampling to
    /// the model's fixed frame count when needed.
    fn flatten(&self, motion: &MotionSequence) -> Result<Array2<f64>> {
        if motion.features() != FEATURE_COUNT {
            return Err(Error::Contract(format!(
                "expected {FEATURE_COUNT} features, got {}",
                motion.features()
            )));
        }
        let m = if motion.frames() == self.structure.frames {
            motion.clone()
        } else {
            motion.resample(self.structure.frames)?
        };
        Ok(m
            .data
            .into_shape((1, self.structure.input_dim()))
            .map_err(|e| Error::Contract(e.to_string()))?)
    }

    /// Plain encoder pass over a batch of flattened inputs.
    pub fn encode_batch(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = mlp_forward_plain(&self.params, "enc.trunk", 1, x).mapv(f64::tanh);
        let mu = h.dot(self.params.get("enc.mu.w")) + self.params.get("enc.mu.b");
        let logsig_raw = h.dot(self.params.get("enc.logsig.w")) + self.params.get("enc.logsig.b");
        let sigma = logsig_raw.mapv(|v| v.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln()).exp());
        (mu, sigma)
    }

    /// Plain decoder pass over a batch of latents.
    pub fn decode_batch(&self, z: &Array2<f64>) -> Array2<f64> {
        mlp_forward_plain(&self.params, "dec", 2, z)
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
        meta.insert(
            "structure".to_string(),
            serde_json::to_string(&self.structure)?,
        );
        Ok(Checkpoint::from_params("vae", &self.params, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<VaeModel> {
        if ckpt.kind != "vae" {
            return Err(Error::Contract(format!(
                "expected vae checkpoint, got {}",
                ckpt.kind
            )));
        }
        let structure: VaeStructure = serde_json::from_str(
            ckpt.meta
                .get("structure")
                .ok_or_else(|| Error::Integrity("vae checkpoint missing structure".to_string()))?,
        )?;
        Ok(VaeModel {
            params: ckpt.params()?,
            structure,
        })
    }
}

/// Deterministic encoding of a normalized motion.
pub fn encode(motion: &MotionSequence, model: &VaeModel) -> Result<EncoderOutput> {
    let x = model.flatten(motion)?;
    let (mu, sigma) = model.encode_batch(&x);
    Ok(EncoderOutput {
        mu: mu.index_axis(Axis(0), 0).to_owned(),
        sigma: sigma.index_axis(Axis(0), 0).to_owned(),
    })
}

/// Reparameterized draw: `z = mu + sigma * rho`.
pub fn sample_latent(enc: &EncoderOutput, rho: &Array1<f64>) -> Result<LatentVector> {
    if rho.len() != enc.mu.len() {
        return Err(Error::Contract("rho dimension mismatch".to_string()));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("rho contains non-finite values".to_string()));
    }
    Ok(LatentVector {
        z: &enc.mu + &(&enc.sigma * rho),
    })
}

/// Deterministic single-pass decoding to a normalized motion.
pub fn decode(z: &LatentVector, frames: usize, model: &VaeModel) -> Result<MotionSequence> {
    if frames < model.structure.f_min || frames > model.structure.f_max {
        return Err(Error::Contract(format!(
            "frames {frames} outside [{}, {}]",
            model.structure.f_min, model.structure.f_max
        )));
    }
    let zr = z
        .z
        .clone()
        .into_shape((1, z.z.len()))
        .map_err(|e| Error::Contract(e.to_string()))?;
    let flat = model.decode_batch(&zr);
    let data = flat
        .into_shape((model.structure.frames, FEATURE_COUNT))
        .map_err(|e| Error::Contract(e.to_string()))?;
    let m = MotionSequence::new(data, model.structure.fps)?;
    if frames == model.structure.frames {
        Ok(m)
    } else {
        m.resample(frames)
    }
}

/// The two reported terms of the objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub total: f64,
    pub recon: f64,
    /// Unweighted closed-form KL to the standard normal prior.
    pub kl: f64,
}

struct ElboTape {
    tape: Tape,
    binding: TapeBinding,
    total: Var,
    recon: Var,
    kl: Var,
}

/// Record the full objective on a tape for a batch of flattened inputs.
fn build_elbo_tape(
    model: &VaeModel,
    x: &Array2<f64>,
    rho: &Array2<f64>,
    kl_weight: f64,
) -> ElboTape {
    let d = model.structure.latent_dim as f64;
    let mut tape = Tape::new();
    let binding = TapeBinding::bind(&mut tape, &model.params);

    let xi = tape.leaf(x.clone());
    let h = mlp_forward_tape(&mut tape, &binding, "enc.trunk", 1, xi);
    let h = tape.tanh(h);

    let mu_w = binding.var("enc.mu.w");
    let mu_b = binding.var("enc.mu.b");
    let mu = tape.matmul(h, mu_w);
    let mu = tape.add_row(mu, mu_b);

    let ls_w = binding.var("enc.logsig.w");
    let ls_b = binding.var("enc.logsig.b");
    let logsig = tape.matmul(h, ls_w);
    let logsig = tape.add_row(logsig, ls_b);
    let logsig = tape.clamp(logsig, SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let sigma = tape.exp(logsig);

    let rho_i = tape.leaf(rho.clone());
    let noise = tape.mul(sigma, rho_i);
    let z = tape.add(mu, noise);

    let recon = mlp_forward_tape(&mut tape, &binding, "dec", 2, z);
    let diff = tape.sub(recon, xi);
    let sq = tape.square(diff);
    let recon_term = tape.mean(sq);

    // KL(N(mu, diag(sigma^2)) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1 - 2 log sigma),
    // summed over latent dims, averaged over the batch.
    let mu_sq = tape.square(mu);
    let sigma_sq = tape.square(sigma);
    let two_logsig = tape.scale(logsig, 2.0);
    let a = tape.add(mu_sq, sigma_sq);
    let b = tape.sub(a, two_logsig);
    let kl_elem = tape.add_scalar(b, -1.0);
    let kl_mean = tape.mean(kl_elem);
    let kl = tape.scale(kl_mean, 0.5 * d);

    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(recon_term, weighted);

    ElboTape {
        tape,
        binding,
        total,
        recon: recon_term,
        kl,
    }
}

/// Objective for a single normalized motion with an explicit noise draw.
pub fn elbo_loss(
    motion: &MotionSequence,
    model: &VaeModel,
    rho: &Array1<f64>,
    kl_weight: f64,
) -> Result<ElboParts> {
    if rho.len() != model.structure.latent_dim {
        return Err(Error::Contract("rho dimension mismatch".to_string()));
    }
    let x = model.flatten(motion)?;
    let rho2 = rho
        .clone()
        .into_shape((1, rho.len()))
        .map_err(|e| Error::Contract(e.to_string()))?;
    let t = build_elbo_tape(model, &x, &rho2, kl_weight);
    let parts = ElboParts {
        total: t.tape.scalar(t.total),
        recon: t.tape.scalar(t.recon),
        kl: t.tape.scalar(t.kl),
    };
    if !parts.total.is_finite() {
        return Err(Error::Numeric("non-finite elbo loss".to_string()));
    }
    Ok(parts)
}

/// Closed-form KL for a diagonal Gaussian against the standard normal, used
/// as the baseline for gradient and value checks.
pub fn gaussian_kl(mu: &Array1<f64>, sigma: &Array1<f64>) -> f64 {
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeLossRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
}

/// Train on the normalized train split. Deterministic given the seed; zero
/// steps returns the seeded initialization untouched.
pub fn train_vae(
    dataset: &MotionDataset,
    config: &VaeConfig,
    structure: VaeStructure,
    seed: u64,
) -> Result<(VaeModel, Vec<VaeLossRecord>)> {
    config.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::Contract("train split is empty".to_string()));
    }

    let mut model = init_vae(structure, derive_seed(seed, "vae-init", 0));
    let stats = &dataset.norm_stats;
    let n = dataset.records.len();
    let in_dim = model.structure.input_dim();

    // Normalize and flatten the whole split once.
    let mut inputs = Array2::<f64>::zeros((n, in_dim));
    for (i, (_, m)) in dataset.records.iter().enumerate() {
        let norm = stats.normalize(m)?;
        let flat = model.flatten(&norm)?;
        inputs.row_mut(i).assign(&flat.row(0));
    }

    let mut opt = Optimizer::new(config.optimizer, config.lr, 0.9);
    let mut order_rng = derived_rng(seed, "vae-batch", 0);
    let mut rho_rng = derived_rng(seed, "vae-rho", 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force reshuffle on first use
    let mut history = Vec::with_capacity(config.steps);
    let warmup = (config.steps as f64 * config.kl_warmup_frac).ceil().max(1.0);

    for step in 0..config.steps {
        let mut batch = Array2::<f64>::zeros((config.batch, in_dim));
        for b in 0..config.batch {
            if cursor >= n {
                for i in (1..n).rev() {
                    let j = rand::Rng::gen_range(&mut order_rng, 0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.row_mut(b).assign(&inputs.row(order[cursor]));
            cursor += 1;
        }
        let rho = Array2::from_shape_fn((config.batch, model.structure.latent_dim), |_| {
            StandardNormal.sample(&mut rho_rng)
        });
        let kl_w = config.kl_weight * ((step as f64 + 1.0) / warmup).min(1.0);

        let t = build_elbo_tape(&model, &batch, &rho, kl_w);
        let total = t.tape.scalar(t.total);
        if !total.is_finite() {
            return Err(Error::Training {
                step,
                msg: "elbo loss became non-finite".to_string(),
            });
        }
        history.push(VaeLossRecord {
            step,
            total,
            recon: t.tape.scalar(t.recon),
            kl: t.tape.scalar(t.kl),
            kl_weight: kl_w,
        });
        let node_grads = t.tape.backward(t.total);
        let grads = t.binding.grads(&model.params, &node_grads);
        opt.step(&mut model.params, &grads, &FreezeMask::none());
    }

    Ok((model, history))
}

/// Analytic gradients of the single-motion objective, for verification.
pub fn elbo_gradients(
    motion: &MotionSequence,
    model: &VaeModel,
    rho: &Array1<f64>,
    kl_weight: f64,
) -> Result<crate::nn::ParamGrads> {
    let x = model.flatten(motion)?;
    let rho2 = rho
        .clone()
        .into_shape((1, rho.len()))
        .map_err(|e| Error::Contract(e.to_string()))?;
    let t = build_elbo_tape(model, &x, &rho2, kl_weight);
    let node_grads = t.tape.backward(t.total);
    Ok(t.binding.grads(&model.params, &node_grads))
}

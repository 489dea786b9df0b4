//! Synthetic motion world: parametric skeleton trajectories, structured
//! prompts, token rendering, and dataset generation with normalization.
//!
//! Motions are planar 5-joint skeletons. Each frame carries the xy position
//! of every joint plus the root velocity, giving V = 12 features. Five
//! action families (walk, jump, circle, spin, stand) are closed-form
//! functions of time and three continuous attributes, so an analytic judge
//! can score any motion exactly (see [`crate::oracle`]).

use std::f64::consts::{PI, TAU};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from_seed};

pub const JOINT_COUNT: usize = 5;
/// Features per frame: xy per joint plus root velocity xy.
pub const FEATURE_COUNT: usize = 2 * JOINT_COUNT + 2;

/// Rest-pose joint offsets relative to the root: root, head, left hand,
/// right hand, foot.
pub const REST_OFFSETS: [[f64; 2]; JOINT_COUNT] = [
    [0.0, 0.0],
    [0.0, 0.9],
    [-0.35, 0.45],
    [0.35, 0.45],
    [0.0, -0.9],
];

pub const SPEED_RANGE: (f64, f64) = (0.5, 2.0);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.2, 1.5);

// Family shape constants.
pub(crate) const HAND_SWING: f64 = 0.30;
pub(crate) const FOOT_SWING: f64 = 0.20;
pub(crate) const HEAD_BOB: f64 = 0.05;
pub const JUMP_DRIFT: f64 = 0.4;
pub const SPIN_RATE: f64 = PI;

/// The five action classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Walk,
    Jump,
    Circle,
    Spin,
    Stand,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Walk,
        Action::Jump,
        Action::Circle,
        Action::Spin,
        Action::Stand,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Walk => "walk",
            Action::Jump => "jump",
            Action::Circle => "circle",
            Action::Spin => "spin",
            Action::Stand => "stand",
        }
    }

    /// Verb used in the token template.
    fn verb(&self) -> &'static str {
        match self {
            Action::Walk => "walks",
            Action::Jump => "jumps",
            Action::Circle => "circles",
            Action::Spin => "spins",
            Action::Stand => "stands",
        }
    }
}

/// Structured prompt: an action plus continuous attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub action: Action,
    pub speed: f64,
    pub amplitude: f64,
    /// Heading / initial phase in radians.
    pub direction: f64,
    pub prompt_id: u64,
}

impl PromptSpec {
    pub fn new(
        action: Action,
        speed: f64,
        amplitude: f64,
        direction: f64,
        prompt_id: u64,
    ) -> Result<Self> {
        let p = PromptSpec {
            action,
            speed,
            amplitude,
            direction,
            prompt_id,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speed >= SPEED_RANGE.0 && self.speed <= SPEED_RANGE.1) {
            return Err(Error::Domain(format!(
                "speed {} outside [{}, {}]",
                self.speed, SPEED_RANGE.0, SPEED_RANGE.1
            )));
        }
        if !(self.amplitude >= AMPLITUDE_RANGE.0 && self.amplitude <= AMPLITUDE_RANGE.1) {
            return Err(Error::Domain(format!(
                "amplitude {} outside [{}, {}]",
                self.amplitude, AMPLITUDE_RANGE.0, AMPLITUDE_RANGE.1
            )));
        }
        if !self.direction.is_finite() {
            return Err(Error::Domain("direction must be finite".to_string()));
        }
        Ok(())
    }
}

/// A motion clip: F x V feature matrix at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    /// F x V features, frames in rows.
    pub data: Array2<f64>,
    pub fps: u32,
}

impl MotionSequence {
    pub fn new(data: Array2<f64>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::Contract("fps must be positive".to_string()));
        }
        if data.ncols() != FEATURE_COUNT {
            return Err(Error::Contract(format!(
                "motion must have {FEATURE_COUNT} features, got {}",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("motion contains non-finite values".to_string()));
        }
        Ok(MotionSequence { data, fps })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }

    /// Root xy position at a frame.
    pub fn root(&self, frame: usize) -> [f64; 2] {
        [self.data[[frame, 0]], self.data[[frame, 1]]]
    }

    /// Root velocity features at a frame.
    pub fn root_velocity(&self, frame: usize) -> [f64; 2] {
        [
            self.data[[frame, 2 * JOINT_COUNT]],
            self.data[[frame, 2 * JOINT_COUNT + 1]],
        ]
    }

    /// Linear resampling along the frame axis.
    pub fn resample(&self, target_frames: usize) -> Result<MotionSequence> {
        if target_frames == 0 {
            return Err(Error::Contract("cannot resample to zero frames".to_string()));
        }
        let f = self.frames();
        if f == target_frames {
            return Ok(self.clone());
        }
        let mut out = Array2::<f64>::zeros((target_frames, self.features()));
        for i in 0..target_frames {
            let pos = if target_frames == 1 {
                0.0
            } else {
                i as f64 * (f - 1) as f64 / (target_frames - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(f - 1);
            let w = pos - lo as f64;
            for j in 0..self.features() {
                out[[i, j]] = self.data[[lo, j]] * (1.0 - w) + self.data[[hi, j]] * w;
            }
        }
        MotionSequence::new(out, self.fps)
    }
}

/// Token rendering of a prompt; ids index the fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u16>,
}

pub const MAX_TOKENS: usize = 8;

const SPEED_WORDS: [&str; 10] = [
    "glacially",
    "sluggishly",
    "slowly",
    "leisurely",
    "steadily",
    "briskly",
    "quickly",
    "swiftly",
    "rapidly",
    "frantically",
];

const AMPLITUDE_WORDS: [&str; 10] = [
    "imperceptibly",
    "barely",
    "slightly",
    "gently",
    "moderately",
    "noticeably",
    "broadly",
    "widely",
    "expansively",
    "hugely",
];

/// Fixed vocabulary. Index 0/1 are reserved control tokens.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "<unk>", "a", "person"];
    for a in Action::ALL {
        v.push(a.verb());
    }
    v.extend_from_slice(&SPEED_WORDS);
    v.extend_from_slice(&AMPLITUDE_WORDS);
    v
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

fn word_id(word: &str) -> u16 {
    vocabulary()
        .iter()
        .position(|w| *w == word)
        .map(|i| i as u16)
        .unwrap_or(1)
}

/// Bucket index of a speed value on the 10-cell grid.
pub fn speed_bucket(speed: f64) -> usize {
    let frac = (speed - SPEED_RANGE.0) / (SPEED_RANGE.1 - SPEED_RANGE.0);
    ((frac * 10.0).floor() as usize).min(9)
}

/// Bucket index of an amplitude value on the 10-cell grid.
pub fn amplitude_bucket(amplitude: f64) -> usize {
    let frac = (amplitude - AMPLITUDE_RANGE.0) / (AMPLITUDE_RANGE.1 - AMPLITUDE_RANGE.0);
    ((frac * 10.0).floor() as usize).min(9)
}

/// Representative attribute value at the center of a speed bucket.
pub fn speed_bucket_center(bucket: usize) -> f64 {
    SPEED_RANGE.0 + (bucket as f64 + 0.5) / 10.0 * (SPEED_RANGE.1 - SPEED_RANGE.0)
}

/// Representative attribute value at the center of an amplitude bucket.
pub fn amplitude_bucket_center(bucket: usize) -> f64 {
    AMPLITUDE_RANGE.0 + (bucket as f64 + 0.5) / 10.0 * (AMPLITUDE_RANGE.1 - AMPLITUDE_RANGE.0)
}

impl TokenSeq {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() > MAX_TOKENS {
            return Err(Error::Contract(format!(
                "token sequence longer than {MAX_TOKENS}"
            )));
        }
        let n = vocab_size() as u16;
        if self.tokens.iter().any(|&t| t >= n) {
            return Err(Error::Contract("token id outside vocabulary".to_string()));
        }
        Ok(())
    }

    /// Words for debugging / report output.
    pub fn words(&self) -> Vec<&'static str> {
        let vocab = vocabulary();
        self.tokens.iter().map(|&t| vocab[t as usize]).collect()
    }
}

/// Deterministic template: "a person <action> <speed-bucket> <amplitude-bucket>".
pub fn render_tokens(prompt: &PromptSpec) -> TokenSeq {
    let tokens = vec![
        word_id("a"),
        word_id("person"),
        word_id(prompt.action.verb()),
        word_id(SPEED_WORDS[speed_bucket(prompt.speed)]),
        word_id(AMPLITUDE_WORDS[amplitude_bucket(prompt.amplitude)]),
    ];
    TokenSeq { tokens }
}

/// Domain-level configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DomainConfig {
    pub fps: u32,
    /// Frames generated for every dataset record.
    pub frames: usize,
    pub f_min: usize,
    pub f_max: usize,
    /// Std of the per-feature jitter added to ground truth.
    pub noise_scale: f64,
    pub n_prompts: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            fps: 20,
            frames: 60,
            f_min: 16,
            f_max: 120,
            noise_scale: 0.02,
            n_prompts: 400,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 {
            return Err(Error::Config("fps must be positive".to_string()));
        }
        if self.f_min < 4 || self.f_min > self.f_max {
            return Err(Error::Config(format!(
                "invalid frame bounds [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if self.frames < self.f_min || self.frames > self.f_max {
            return Err(Error::Config(format!(
                "frames {} outside [{}, {}]",
                self.frames, self.f_min, self.f_max
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be >= 0".to_string()));
        }
        Ok(())
    }
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn perp(theta: f64) -> [f64; 2] {
    [-theta.sin(), theta.cos()]
}

/// Noise-free family member: the closed-form trajectory for an action and
/// attribute triple. Shared by the generator and the analytic judge.
pub fn synth_family(
    action: Action,
    speed: f64,
    amplitude: f64,
    direction: f64,
    frames: usize,
    fps: u32,
) -> Array2<f64> {
    let mut data = Array2::<f64>::zeros((frames, FEATURE_COUNT));
    let dt = 1.0 / fps as f64;
    let t_clip = (frames.saturating_sub(1)).max(1) as f64 * dt;
    for k in 0..frames {
        let t = k as f64 * dt;
        let frame = family_frame(action, speed, amplitude, direction, t, t_clip);
        for j in 0..FEATURE_COUNT {
            data[[k, j]] = frame[j];
        }
    }
    data
}

/// One frame of a family member at time `t`.
pub fn family_frame(
    action: Action,
    speed: f64,
    amplitude: f64,
    direction: f64,
    t: f64,
    t_clip: f64,
) -> [f64; FEATURE_COUNT] {
    let mut out = [0.0; FEATURE_COUNT];
    let u = unit(direction);
    let w = perp(direction);
    match action {
        Action::Stand => {
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                out[2 * i] = o[0];
                out[2 * i + 1] = o[1];
            }
        }
        Action::Walk => {
            let root = [speed * t * u[0], speed * t * u[1]];
            let omega = TAU * speed;
            let swing = (omega * t).sin();
            let bob = (2.0 * omega * t).cos();
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                let mut x = root[0] + o[0];
                let mut y = root[1] + o[1];
                match i {
                    1 => {
                        x += amplitude * HEAD_BOB * bob * w[0];
                        y += amplitude * HEAD_BOB * bob * w[1];
                    }
                    2 => {
                        x += amplitude * HAND_SWING * swing * u[0];
                        y += amplitude * HAND_SWING * swing * u[1];
                    }
                    3 => {
                        x -= amplitude * HAND_SWING * swing * u[0];
                        y -= amplitude * HAND_SWING * swing * u[1];
                    }
                    4 => {
                        x += amplitude * FOOT_SWING * swing * u[0];
                        y += amplitude * FOOT_SWING * swing * u[1];
                    }
                    _ => {}
                }
                out[2 * i] = x;
                out[2 * i + 1] = y;
            }
            out[2 * JOINT_COUNT] = speed * u[0];
            out[2 * JOINT_COUNT + 1] = speed * u[1];
        }
        Action::Jump => {
            let tau = t / t_clip;
            let height = 4.0 * amplitude * tau * (1.0 - tau);
            let root = [speed * JUMP_DRIFT * t, height];
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                out[2 * i] = root[0] + o[0];
                out[2 * i + 1] = root[1] + o[1];
            }
            out[2 * JOINT_COUNT] = speed * JUMP_DRIFT;
            out[2 * JOINT_COUNT + 1] = 4.0 * amplitude * (1.0 - 2.0 * tau) / t_clip;
        }
        Action::Circle => {
            // Tangential speed equals the speed attribute; radius equals the
            // amplitude; the clip starts at the origin.
            let omega = speed / amplitude;
            let phi = omega * t + direction;
            let center = [-amplitude * u[0], -amplitude * u[1]];
            let root = [
                center[0] + amplitude * phi.cos(),
                center[1] + amplitude * phi.sin(),
            ];
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                out[2 * i] = root[0] + o[0];
                out[2 * i + 1] = root[1] + o[1];
            }
            out[2 * JOINT_COUNT] = -speed * phi.sin();
            out[2 * JOINT_COUNT + 1] = speed * phi.cos();
        }
        Action::Spin => {
            let psi = SPIN_RATE * speed * t + direction;
            let (s, c) = psi.sin_cos();
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                let sx = amplitude * o[0];
                let sy = amplitude * o[1];
                out[2 * i] = c * sx - s * sy;
                out[2 * i + 1] = s * sx + c * sy;
            }
        }
    }
    out
}

/// Ground-truth generation: family member plus seeded per-feature jitter.
/// Pure function of `(prompt, frames, seed)` for a fixed config.
pub fn generate_ground_truth(
    prompt: &PromptSpec,
    frames: usize,
    seed: u64,
    config: &DomainConfig,
) -> Result<MotionSequence> {
    prompt.validate()?;
    if frames < config.f_min || frames > config.f_max {
        return Err(Error::Contract(format!(
            "frames {frames} outside [{}, {}]",
            config.f_min, config.f_max
        )));
    }
    let mut data = synth_family(
        prompt.action,
        prompt.speed,
        prompt.amplitude,
        prompt.direction,
        frames,
        config.fps,
    );
    if config.noise_scale > 0.0 {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, config.noise_scale)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    MotionSequence::new(data, config.fps)
}

/// Per-feature normalization statistics (population moments of the train
/// split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_motions<'a>(motions: impl Iterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut sum = Array1::<f64>::zeros(FEATURE_COUNT);
        let mut sum_sq = Array1::<f64>::zeros(FEATURE_COUNT);
        let mut n = 0usize;
        for m in motions {
            for row in m.data.rows() {
                for j in 0..FEATURE_COUNT {
                    sum[j] += row[j];
                    sum_sq[j] += row[j] * row[j];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Contract("no frames to compute stats from".to_string()));
        }
        let mean: Vec<f64> = (0..FEATURE_COUNT).map(|j| sum[j] / n as f64).collect();
        let std: Vec<f64> = (0..FEATURE_COUNT)
            .map(|j| {
                let var = (sum_sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
                var.sqrt().max(1e-8)
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        let mut data = motion.data.clone();
        for mut row in data.rows_mut() {
            for j in 0..FEATURE_COUNT {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        if data.iter().any(|v| v.abs() > 10.0) {
            return Err(Error::Contract(
                "normalized features exceed 10 standard deviations".to_string(),
            ));
        }
        MotionSequence::new(data, motion.fps)
    }

    pub fn denormalize(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        let mut data = motion.data.clone();
        for mut row in data.rows_mut() {
            for j in 0..FEATURE_COUNT {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        MotionSequence::new(data, motion.fps)
    }

    /// Normalize a motion without the +-10 sigma dataset invariant. Model
    /// inputs go through this path: generated motions may legitimately sit
    /// far off the data manifold, and scoring them is the whole point.
    pub fn normalize_unbounded(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        MotionSequence::new(self.normalize_unchecked(&motion.data), motion.fps)
    }

    /// Normalize a raw feature matrix without the +-10 sigma check (used for
    /// model-internal round trips).
    pub fn normalize_unchecked(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for j in 0..FEATURE_COUNT {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Which split a dataset holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One split of the toy dataset.
#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub records: Vec<(PromptSpec, MotionSequence)>,
    pub norm_stats: NormStats,
    pub split: Split,
}

impl MotionDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Train/val/test splits sharing one set of normalization stats.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: MotionDataset,
    pub val: MotionDataset,
    pub test: MotionDataset,
}

impl DatasetSplits {
    pub fn norm_stats(&self) -> &NormStats {
        &self.train.norm_stats
    }
}

/// Sample a prompt with uniform attributes; the action is assigned by the
/// caller for stratification.
fn sample_prompt(action: Action, prompt_id: u64, rng: &mut impl Rng) -> PromptSpec {
    PromptSpec {
        action,
        speed: rng.gen_range(SPEED_RANGE.0..SPEED_RANGE.1),
        amplitude: rng.gen_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
        direction: rng.gen_range(0.0..TAU),
        prompt_id,
    }
}

/// Build the three dataset splits: stratified over actions, 80/10/10,
/// normalization stats from the train split only.
pub fn build_dataset(n_prompts: usize, seed: u64, config: &DomainConfig) -> Result<DatasetSplits> {
    config.validate()?;
    if n_prompts < 30 {
        return Err(Error::Config(format!(
            "n_prompts {n_prompts} too small to stratify (need >= 30)"
        )));
    }

    // Stratified prompt list: action cycles, attributes seeded per prompt.
    let mut prompts = Vec::with_capacity(n_prompts);
    for i in 0..n_prompts {
        let action = Action::ALL[i % Action::ALL.len()];
        let mut rng = rng_from_seed(derive_seed(seed, "prompt", i as u64));
        prompts.push(sample_prompt(action, i as u64, &mut rng));
    }

    // Per-action shuffle, then 10% val, 10% test (at least one each), rest
    // train. Splits are disjoint by prompt id.
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    let mut test_ids = Vec::new();
    for action in Action::ALL {
        let mut ids: Vec<usize> = prompts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.action == action)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_from_seed(derive_seed(seed, "split", action as u64));
        for i in (1..ids.len()).rev() {
            let j = rng.gen_range(0..=i);
            ids.swap(i, j);
        }
        let n = ids.len();
        let n_val = (n / 10).max(1);
        let n_test = (n / 10).max(1);
        if n_val + n_test >= n {
            return Err(Error::Config(format!(
                "action {} has too few prompts ({n}) to split",
                action.as_str()
            )));
        }
        val_ids.extend_from_slice(&ids[0..n_val]);
        test_ids.extend_from_slice(&ids[n_val..n_val + n_test]);
        train_ids.extend_from_slice(&ids[n_val + n_test..]);
    }
    train_ids.sort_unstable();
    val_ids.sort_unstable();
    test_ids.sort_unstable();

    let make_records = |ids: &[usize]| -> Result<Vec<(PromptSpec, MotionSequence)>> {
        ids.iter()
            .map(|&i| {
                let p = prompts[i];
                let m = generate_ground_truth(
                    &p,
                    config.frames,
                    derive_seed(seed, "gt", p.prompt_id),
                    config,
                )?;
                Ok((p, m))
            })
            .collect()
    };

    let train_records = make_records(&train_ids)?;
    let val_records = make_records(&val_ids)?;
    let test_records = make_records(&test_ids)?;

    let norm_stats = NormStats::from_motions(train_records.iter().map(|(_, m)| m))?;

    Ok(DatasetSplits {
        train: MotionDataset {
            records: train_records,
            norm_stats: norm_stats.clone(),
            split: Split::Train,
        },
        val: MotionDataset {
            records: val_records,
            norm_stats: norm_stats.clone(),
            split: Split::Val,
        },
        test: MotionDataset {
            records: test_records,
            norm_stats,
            split: Split::Test,
        },
    })
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    schema: u32,
    prompt_id: u64,
    action: Action,
    speed: f64,
    amplitude: f64,
    direction: f64,
    fps: u32,
    frames: usize,
    features: usize,
    /// Row-major flattened motion data.
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsSidecar {
    schema: u32,
    features: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.jsonl",
        Split::Val => "val.jsonl",
        Split::Test => "test.jsonl",
    }
}

/// Persist all three splits as line-delimited JSON plus a stats sidecar.
pub fn save_splits(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for ds in [&splits.train, &splits.val, &splits.test] {
        let mut out = String::new();
        for (p, m) in &ds.records {
            let line = RecordLine {
                schema: DATASET_SCHEMA_VERSION,
                prompt_id: p.prompt_id,
                action: p.action,
                speed: p.speed,
                amplitude: p.amplitude,
                direction: p.direction,
                fps: m.fps,
                frames: m.frames(),
                features: m.features(),
                data: m.data.iter().cloned().collect(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        crate::artifacts::atomic_write(&dir.join(split_file(ds.split)), out.as_bytes())?;
    }
    let sidecar = StatsSidecar {
        schema: DATASET_SCHEMA_VERSION,
        features: FEATURE_COUNT,
        mean: splits.norm_stats().mean.clone(),
        std: splits.norm_stats().std.clone(),
    };
    crate::artifacts::atomic_write(
        &dir.join("norm_stats.json"),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;
    Ok(())
}

fn load_split(dir: &Path, split: Split, norm_stats: &NormStats) -> Result<MotionDataset> {
    let text = std::fs::read_to_string(dir.join(split_file(split)))?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(line)?;
        if rec.schema != DATASET_SCHEMA_VERSION {
            return Err(Error::Integrity(format!(
                "unknown dataset schema version {}",
                rec.schema
            )));
        }
        if rec.data.len() != rec.frames * rec.features {
            return Err(Error::Integrity(format!(
                "record {}: payload length mismatch",
                rec.prompt_id
            )));
        }
        let prompt = PromptSpec::new(rec.action, rec.speed, rec.amplitude, rec.direction, rec.prompt_id)?;
        let data = Array2::from_shape_vec((rec.frames, rec.features), rec.data)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        records.push((prompt, MotionSequence::new(data, rec.fps)?));
    }
    Ok(MotionDataset {
        records,
        norm_stats: norm_stats.clone(),
        split,
    })
}

/// Load all three splits and the stats sidecar.
pub fn load_splits(dir: &Path) -> Result<DatasetSplits> {
    let sidecar: StatsSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join("norm_stats.json"))?)?;
    if sidecar.schema != DATASET_SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "unknown stats schema version {}",
            sidecar.schema
        )));
    }
    if sidecar.features != FEATURE_COUNT {
        return Err(Error::Integrity("stats feature count mismatch".to_string()));
    }
    let norm_stats = NormStats {
        mean: sidecar.mean,
        std: sidecar.std,
    };
    Ok(DatasetSplits {
        train: load_split(dir, Split::Train, &norm_stats)?,
        val: load_split(dir, Split::Val, &norm_stats)?,
        test: load_split(dir, Split::Test, &norm_stats)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_config() -> DomainConfig {
        DomainConfig {
            noise_scale: 0.0,
            ..DomainConfig::default()
        }
    }

    fn prompt(action: Action, speed: f64, amplitude: f64, direction: f64) -> PromptSpec {
        PromptSpec::new(action, speed, amplitude, direction, 0).unwrap()
    }

    #[test]
    fn stand_with_zero_noise_is_rest_pose_every_frame() {
        let p = prompt(Action::Stand, 1.0, 0.5, 0.3);
        let m = generate_ground_truth(&p, 60, 7, &quiet_config()).unwrap();
        for k in 0..m.frames() {
            for (i, o) in REST_OFFSETS.iter().enumerate() {
                assert_eq!(m.data[[k, 2 * i]], o[0]);
                assert_eq!(m.data[[k, 2 * i + 1]], o[1]);
            }
            assert_eq!(m.root_velocity(k), [0.0, 0.0]);
        }
    }

    #[test]
    fn circle_root_stays_on_radius() {
        for &(r, dir) in &[(0.4, 0.0), (0.9, 1.2), (1.5, -2.0)] {
            let p = prompt(Action::Circle, 1.3, r, dir);
            let m = generate_ground_truth(&p, 60, 7, &quiet_config()).unwrap();
            let center = [-r * dir.cos(), -r * dir.sin()];
            for k in 0..m.frames() {
                let root = m.root(k);
                let d = ((root[0] - center[0]).powi(2) + (root[1] - center[1]).powi(2)).sqrt();
                assert!((d - r).abs() < 1e-9, "frame {k}: distance {d} vs radius {r}");
            }
        }
    }

    #[test]
    fn jump_height_is_concave_parabola_with_mid_flight_peak() {
        let frames = 61; // odd so the peak lands exactly on one frame
        let amp = 0.8;
        let p = prompt(Action::Jump, 1.0, amp, 0.0);
        let cfg = quiet_config();
        let m = generate_ground_truth(&p, frames, 7, &cfg).unwrap();

        // Independent ballistic arc: h(t) = v0*t - 0.5*g*t^2 with apex amp at
        // t = T/2 implies v0 = 4*amp/T and g = 8*amp/T^2.
        let t_total = (frames - 1) as f64 / cfg.fps as f64;
        let v0 = 4.0 * amp / t_total;
        let g = 8.0 * amp / (t_total * t_total);
        let mut peak_frame = 0;
        let mut peak = f64::NEG_INFINITY;
        for k in 0..frames {
            let t = k as f64 / cfg.fps as f64;
            let expected = v0 * t - 0.5 * g * t * t;
            let h = m.data[[k, 1]]; // root y
            assert!((h - expected).abs() < 1e-9, "frame {k}: {h} vs {expected}");
            if h > peak {
                peak = h;
                peak_frame = k;
            }
        }
        assert_eq!(peak_frame, (frames - 1) / 2);
        assert!((peak - amp).abs() < 1e-9);

        // Concavity: second differences strictly negative.
        for k in 1..frames - 1 {
            let second =
                m.data[[k + 1, 1]] - 2.0 * m.data[[k, 1]] + m.data[[k - 1, 1]];
            assert!(second < 0.0);
        }
    }

    #[test]
    fn generation_is_pure_in_prompt_frames_seed() {
        let cfg = DomainConfig::default();
        let p = prompt(Action::Walk, 1.4, 0.9, 0.2);
        let a = generate_ground_truth(&p, 60, 11, &cfg).unwrap();
        let b = generate_ground_truth(&p, 60, 11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_ground_truth(&p, 60, 12, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_attributes_are_domain_errors() {
        let bad = PromptSpec {
            action: Action::Walk,
            speed: 3.0,
            amplitude: 0.5,
            direction: 0.0,
            prompt_id: 0,
        };
        let err = generate_ground_truth(&bad, 60, 1, &DomainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn frames_out_of_bounds_is_contract_error() {
        let p = prompt(Action::Walk, 1.0, 0.5, 0.0);
        let err = generate_ground_truth(&p, 2, 1, &DomainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn identical_prompts_render_identical_tokens() {
        let a = prompt(Action::Jump, 0.9, 0.8, 0.1);
        let b = prompt(Action::Jump, 0.9, 0.8, 2.9); // direction not tokenized
        assert_eq!(render_tokens(&a), render_tokens(&b));
    }

    #[test]
    fn action_changes_the_action_slot_only() {
        let a = prompt(Action::Walk, 1.0, 0.7, 0.0);
        let b = prompt(Action::Spin, 1.0, 0.7, 0.0);
        let ta = render_tokens(&a).tokens;
        let tb = render_tokens(&b).tokens;
        assert_ne!(ta[2], tb[2]);
        assert_eq!(&ta[..2], &tb[..2]);
        assert_eq!(&ta[3..], &tb[3..]);
    }

    #[test]
    fn tokens_are_injective_over_the_discretized_grid() {
        let mut seen = std::collections::HashSet::new();
        for action in Action::ALL {
            for sb in 0..10 {
                for ab in 0..10 {
                    let p = prompt(
                        action,
                        speed_bucket_center(sb),
                        amplitude_bucket_center(ab),
                        0.0,
                    );
                    let t = render_tokens(&p);
                    t.validate().unwrap();
                    assert!(t.tokens.len() <= MAX_TOKENS);
                    assert!(seen.insert(t.tokens), "grid cell collides");
                }
            }
        }
        assert_eq!(seen.len(), 5 * 10 * 10);
    }

    #[test]
    fn dataset_splits_are_80_10_10_for_100_prompts() {
        let splits = build_dataset(100, 5, &DomainConfig::default()).unwrap();
        assert_eq!(splits.train.len(), 80);
        assert_eq!(splits.val.len(), 10);
        assert_eq!(splits.test.len(), 10);
    }

    #[test]
    fn dataset_splits_are_disjoint_and_cover() {
        let splits = build_dataset(100, 5, &DomainConfig::default()).unwrap();
        let mut all: Vec<u64> = splits
            .train
            .records
            .iter()
            .chain(&splits.val.records)
            .chain(&splits.test.records)
            .map(|(p, _)| p.prompt_id)
            .collect();
        all.sort_unstable();
        let expected: Vec<u64> = (0..100).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn too_few_prompts_is_config_error() {
        let err = build_dataset(29, 5, &DomainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn normalize_then_denormalize_round_trips() {
        let splits = build_dataset(50, 9, &DomainConfig::default()).unwrap();
        let stats = splits.norm_stats();
        for (_, m) in splits.val.records.iter().take(5) {
            let n = stats.normalize(m).unwrap();
            let d = stats.denormalize(&n).unwrap();
            for (a, b) in m.data.iter().zip(d.data.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn train_split_moments_recompute_to_zero_one() {
        let splits = build_dataset(100, 5, &DomainConfig::default()).unwrap();
        let stats = splits.norm_stats();
        // Independent recomputation of per-feature moments after normalizing.
        let mut sum = vec![0.0; FEATURE_COUNT];
        let mut sum_sq = vec![0.0; FEATURE_COUNT];
        let mut n = 0usize;
        for (_, m) in &splits.train.records {
            let norm = stats.normalize(m).unwrap();
            for row in norm.data.rows() {
                for j in 0..FEATURE_COUNT {
                    sum[j] += row[j];
                    sum_sq[j] += row[j] * row[j];
                }
                n += 1;
            }
        }
        for j in 0..FEATURE_COUNT {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "feature {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "feature {j} std {}", var.sqrt());
        }
    }

    #[test]
    fn splits_save_and_load_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let splits = build_dataset(40, 3, &DomainConfig::default()).unwrap();
        save_splits(dir.path(), &splits).unwrap();
        let loaded = load_splits(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), splits.train.len());
        assert_eq!(loaded.norm_stats(), splits.norm_stats());
        for ((pa, ma), (pb, mb)) in splits.train.records.iter().zip(&loaded.train.records) {
            assert_eq!(pa, pb);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn resampling_preserves_endpoints() {
        let p = prompt(Action::Walk, 1.0, 0.8, 0.4);
        let m = generate_ground_truth(&p, 60, 1, &quiet_config()).unwrap();
        let r = m.resample(31).unwrap();
        assert_eq!(r.frames(), 31);
        for j in 0..FEATURE_COUNT {
            assert!((r.data[[0, j]] - m.data[[0, j]]).abs() < 1e-12);
            assert!((r.data[[30, j]] - m.data[[59, j]]).abs() < 1e-12);
        }
        let same = m.resample(60).unwrap();
        assert_eq!(same, m);
    }
}

//! Python bindings: the toy domain, schedules, the forward process, pair
//! machinery, the analytic judge, and distribution metrics.
//!
//! Motions cross the boundary as row-major nested lists (frames x
//! features); build the extension with `cargo build -p motion-align-py`
//! and see `python/smoke_test.py` for usage.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use motion_align::diffusion;
use motion_align::domain;
use motion_align::dpo;
use motion_align::error::Error;
use motion_align::metrics;
use motion_align::oracle;
use motion_align::pam;

fn to_py_err(e: Error) -> PyErr {
    PyValueError::new_err(format!("[{}] {e}", e.category()))
}

fn parse_action(name: &str) -> PyResult<domain::Action> {
    domain::Action::ALL
        .into_iter()
        .find(|a| a.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown action {name}")))
}

fn motion_from_rows(rows: Vec<Vec<f64>>, fps: u32) -> PyResult<domain::MotionSequence> {
    let frames = rows.len();
    let features = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != features) {
        return Err(PyValueError::new_err("ragged motion rows"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let data = Array2::from_shape_vec((frames, features), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    domain::MotionSequence::new(data, fps).map_err(to_py_err)
}

fn motion_to_rows(m: &domain::MotionSequence) -> Vec<Vec<f64>> {
    m.data.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Structured prompt: action plus continuous attributes.
#[pyclass(name = "PromptSpec", from_py_object)]
#[derive(Clone)]
struct PyPromptSpec {
    inner: domain::PromptSpec,
}

#[pymethods]
impl PyPromptSpec {
    #[new]
    #[pyo3(signature = (action, speed, amplitude, direction, prompt_id = 0))]
    fn new(
        action: &str,
        speed: f64,
        amplitude: f64,
        direction: f64,
        prompt_id: u64,
    ) -> PyResult<Self> {
        let inner =
            domain::PromptSpec::new(parse_action(action)?, speed, amplitude, direction, prompt_id)
                .map_err(to_py_err)?;
        Ok(PyPromptSpec { inner })
    }

    #[getter]
    fn action(&self) -> &'static str {
        self.inner.action.as_str()
    }

    #[getter]
    fn speed(&self) -> f64 {
        self.inner.speed
    }

    #[getter]
    fn amplitude(&self) -> f64 {
        self.inner.amplitude
    }

    #[getter]
    fn direction(&self) -> f64 {
        self.inner.direction
    }

    #[getter]
    fn prompt_id(&self) -> u64 {
        self.inner.prompt_id
    }

    fn __repr__(&self) -> String {
        format!(
            "PromptSpec(action='{}', speed={:.3}, amplitude={:.3}, direction={:.3}, prompt_id={})",
            self.inner.action.as_str(),
            self.inner.speed,
            self.inner.amplitude,
            self.inner.direction,
            self.inner.prompt_id
        )
    }
}

/// A motion clip: frames x features, plus the frame rate.
#[pyclass(name = "MotionSequence", from_py_object)]
#[derive(Clone)]
struct PyMotionSequence {
    inner: domain::MotionSequence,
}

#[pymethods]
impl PyMotionSequence {
    #[new]
    fn new(data: Vec<Vec<f64>>, fps: u32) -> PyResult<Self> {
        Ok(PyMotionSequence {
            inner: motion_from_rows(data, fps)?,
        })
    }

    #[getter]
    fn data(&self) -> Vec<Vec<f64>> {
        motion_to_rows(&self.inner)
    }

    #[getter]
    fn fps(&self) -> u32 {
        self.inner.fps
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    #[getter]
    fn features(&self) -> usize {
        self.inner.features()
    }

    fn resample(&self, frames: usize) -> PyResult<PyMotionSequence> {
        Ok(PyMotionSequence {
            inner: self.inner.resample(frames).map_err(to_py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "MotionSequence(frames={}, features={}, fps={})",
            self.inner.frames(),
            self.inner.features(),
            self.inner.fps
        )
    }
}

/// Variance schedule with derived cumulative products.
#[pyclass(name = "NoiseSchedule", from_py_object)]
#[derive(Clone)]
struct PyNoiseSchedule {
    inner: diffusion::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas.clone()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas.clone()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars.clone()
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max()
    }
}

/// Closed-form ground truth for a prompt.
#[pyfunction]
#[pyo3(signature = (prompt, frames = 60, seed = 0, noise_scale = 0.02, fps = 20))]
fn generate_ground_truth(
    prompt: &PyPromptSpec,
    frames: usize,
    seed: u64,
    noise_scale: f64,
    fps: u32,
) -> PyResult<PyMotionSequence> {
    let config = domain::DomainConfig {
        fps,
        frames,
        f_min: frames.min(16),
        f_max: frames.max(120),
        noise_scale,
        ..Default::default()
    };
    let inner = domain::generate_ground_truth(&prompt.inner, frames, seed, &config)
        .map_err(to_py_err)?;
    Ok(PyMotionSequence { inner })
}

/// Token ids for a prompt under the fixed template.
#[pyfunction]
fn render_tokens(prompt: &PyPromptSpec) -> Vec<u16> {
    domain::render_tokens(&prompt.inner).tokens
}

/// Words of a token id sequence.
#[pyfunction]
fn token_words(tokens: Vec<u16>) -> PyResult<Vec<String>> {
    let seq = domain::TokenSeq { tokens };
    seq.validate().map_err(to_py_err)?;
    Ok(seq.words().into_iter().map(String::from).collect())
}

/// The fixed vocabulary.
#[pyfunction]
fn vocabulary() -> Vec<String> {
    domain::vocabulary().into_iter().map(String::from).collect()
}

/// Build a variance schedule ("linear" or "cosine").
#[pyfunction]
fn make_schedule(kind: &str, t: usize, beta_min: f64, beta_max: f64) -> PyResult<PyNoiseSchedule> {
    let kind = match kind {
        "linear" => diffusion::ScheduleKind::Linear,
        "cosine" => diffusion::ScheduleKind::Cosine,
        other => return Err(PyValueError::new_err(format!("unknown schedule {other}"))),
    };
    Ok(PyNoiseSchedule {
        inner: diffusion::make_schedule(kind, t, beta_min, beta_max).map_err(to_py_err)?,
    })
}

/// Forward process marginal: noise a state vector to step t.
#[pyfunction]
fn q_sample(x0: Vec<f64>, t: usize, eps: Vec<f64>, sched: &PyNoiseSchedule) -> PyResult<Vec<f64>> {
    let n = x0.len();
    let x = Array2::from_shape_vec((1, n), x0).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let e = Array2::from_shape_vec((1, n), eps).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = diffusion::q_sample(&x, t, &e, &sched.inner).map_err(to_py_err)?;
    Ok(out.row(0).to_vec())
}

/// Number of unordered winner/loser pairs among n candidates.
#[pyfunction]
fn pair_count(n: usize) -> PyResult<u64> {
    pam::pair_count(n).map_err(to_py_err)
}

/// Draw (winner rank, loser rank) under "edge" or "stochastic" selection.
#[pyfunction]
#[pyo3(signature = (n, selection, seed = 0))]
fn selection_ranks(n: usize, selection: &str, seed: u64) -> PyResult<(usize, usize)> {
    let kind = match selection {
        "edge" => pam::SelectionKind::Edge,
        "stochastic" => pam::SelectionKind::Stochastic,
        other => return Err(PyValueError::new_err(format!("unknown selection {other}"))),
    };
    let mut rng = motion_align::seeding::rng_from_seed(seed);
    pam::selection_ranks(n, kind, Some(&mut rng)).map_err(to_py_err)
}

/// Analytic judge score for a motion under a prompt (0 is perfect).
#[pyfunction]
fn oracle_score(prompt: &PyPromptSpec, motion: &PyMotionSequence) -> f64 {
    oracle::oracle_score(&prompt.inner, &motion.inner)
}

/// Judge feature vector of a motion (family residuals + statistics).
#[pyfunction]
fn oracle_features(motion: &PyMotionSequence) -> Vec<f64> {
    oracle::oracle_features(&motion.inner).to_vec()
}

/// Action family with the smallest fit residual.
#[pyfunction]
fn best_fit_action(motion: &PyMotionSequence) -> &'static str {
    oracle::best_fit(&motion.inner).action.as_str()
}

/// Frechet distance between Gaussian fits of two sample populations.
#[pyfunction]
fn fid_from_samples(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let build = |rows: Vec<Vec<f64>>| -> PyResult<Array2<f64>> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("ragged sample rows"));
        }
        Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
            .map_err(|e| PyValueError::new_err(e.to_string()))
    };
    let sa = metrics::embedding_stats(&build(a)?).map_err(to_py_err)?;
    let sb = metrics::embedding_stats(&build(b)?).map_err(to_py_err)?;
    metrics::fid(&sa, &sb).map_err(to_py_err)
}

/// Preference loss from the four per-branch denoising errors.
#[pyfunction]
fn dpo_loss_from_errors(
    err_w_target: f64,
    err_w_ref: f64,
    err_l_target: f64,
    err_l_ref: f64,
    beta_eff: f64,
) -> f64 {
    dpo::dpo_loss_from_errors(err_w_target, err_w_ref, err_l_target, err_l_ref, beta_eff)
}

/// Per-feature mean Euclidean distance diversity over sample rows.
#[pyfunction]
#[pyo3(signature = (rows, n_pairs = 300, seed = 0))]
fn diversity(rows: Vec<Vec<f64>>, n_pairs: usize, seed: u64) -> PyResult<f64> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let emb = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    metrics::diversity_from_embeddings(&emb, n_pairs, seed).map_err(to_py_err)
}

/// KL divergence of a diagonal Gaussian from the standard normal.
#[pyfunction]
fn gaussian_kl(mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
    if mu.len() != sigma.len() {
        return Err(PyValueError::new_err("mu/sigma length mismatch"));
    }
    Ok(motion_align::vae::gaussian_kl(
        &Array1::from_vec(mu),
        &Array1::from_vec(sigma),
    ))
}

#[pymodule]
fn motion_align_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPromptSpec>()?;
    m.add_class::<PyMotionSequence>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_function(wrap_pyfunction!(generate_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(render_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(token_words, m)?)?;
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(pair_count, m)?)?;
    m.add_function(wrap_pyfunction!(selection_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_score, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_features, m)?)?;
    m.add_function(wrap_pyfunction!(best_fit_action, m)?)?;
    m.add_function(wrap_pyfunction!(fid_from_samples, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss_from_errors, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add("FEATURE_COUNT", domain::FEATURE_COUNT)?;
    m.add("JOINT_COUNT", domain::JOINT_COUNT)?;
    Ok(())
}

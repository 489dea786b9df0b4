//! Named parameter sets, layer initialization, and MLP forward passes.
//!
//! Every model in the crate stores its weights in a [`ParamSet`]: an ordered
//! list of named `Array2<f64>` tensors. The same forward code runs in two
//! modes — recorded on a [`Tape`] for training, or plain `ndarray` math for
//! inference — and both call the identical primitive ops so their outputs
//! are bitwise equal.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Read one scalar by flat index (tensor order, row-major within).
    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for (_, v) in &self.entries {
            if idx < v.len() {
                let c = v.ncols();
                return v[[idx / c, idx % c]];
            }
            idx -= v.len();
        }
        panic!("flat index out of range");
    }

    /// Write one scalar by flat index.
    pub fn flat_set(&mut self, mut idx: usize, value: f64) {
        for (_, v) in &mut self.entries {
            if idx < v.len() {
                let c = v.ncols();
                v[[idx / c, idx % c]] = value;
                return;
            }
            idx -= v.len();
        }
        panic!("flat index out of range");
    }

    /// Name of the tensor owning a flat index.
    pub fn flat_owner(&self, mut idx: usize) -> &str {
        for (n, v) in &self.entries {
            if idx < v.len() {
                return n;
            }
            idx -= v.len();
        }
        panic!("flat index out of range");
    }

    /// True when every scalar in both sets is bitwise identical.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(|(a, b)| {
            a.0 == b.0
                && a.1.shape() == b.1.shape()
                && a.1
                    .iter()
                    .zip(b.1.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter name.
pub type ParamGrads = Vec<(String, Array2<f64>)>;

/// Leafs every parameter onto a tape and remembers the name -> Var mapping.
pub struct TapeBinding {
    vars: Vec<(String, Var)>,
}

impl TapeBinding {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|(n, v)| (n.clone(), tape.leaf(v.clone())))
            .collect();
        TapeBinding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .1
    }

    /// Collect parameter gradients out of a backward pass, zero-filling
    /// parameters the loss did not touch.
    pub fn grads(&self, params: &ParamSet, node_grads: &[Option<Array2<f64>>]) -> ParamGrads {
        self.vars
            .iter()
            .map(|(n, v)| {
                let g = node_grads[v.index()]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(params.get(n).raw_dim()));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Glorot-uniform initialization for a linear layer `in_dim -> out_dim`,
/// stored as weight `(in_dim x out_dim)` plus bias `(1 x out_dim)`.
pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w = Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..bound));
    params.insert(&format!("{prefix}.w"), w);
    params.insert(&format!("{prefix}.b"), Array2::zeros((1, out_dim)));
}

/// MLP with tanh on hidden layers and a linear output layer. `sizes` is the
/// full chain `[in, h1, ..., out]`; layers are named `{prefix}.l{i}`.
pub fn init_mlp(params: &mut ParamSet, prefix: &str, sizes: &[usize], rng: &mut ChaCha8Rng) {
    assert!(sizes.len() >= 2, "mlp needs at least input and output size");
    for i in 0..sizes.len() - 1 {
        init_linear(params, &format!("{prefix}.l{i}"), sizes[i], sizes[i + 1], rng);
    }
}

/// Number of linear layers in an MLP created from `sizes`.
pub fn mlp_layers(sizes: &[usize]) -> usize {
    sizes.len() - 1
}

/// Tape-mode MLP forward.
pub fn mlp_forward_tape(
    tape: &mut Tape,
    binding: &TapeBinding,
    prefix: &str,
    n_layers: usize,
    input: Var,
) -> Var {
    let mut h = input;
    for i in 0..n_layers {
        let w = binding.var(&format!("{prefix}.l{i}.w"));
        let b = binding.var(&format!("{prefix}.l{i}.b"));
        h = tape.matmul(h, w);
        h = tape.add_row(h, b);
        if i + 1 < n_layers {
            h = tape.tanh(h);
        }
    }
    h
}

/// Plain MLP forward; bitwise-identical to the tape path.
pub fn mlp_forward_plain(
    params: &ParamSet,
    prefix: &str,
    n_layers: usize,
    input: &Array2<f64>,
) -> Array2<f64> {
    let mut h = input.clone();
    for i in 0..n_layers {
        let w = params.get(&format!("{prefix}.l{i}.w"));
        let b = params.get(&format!("{prefix}.l{i}.b"));
        h = h.dot(w) + b;
        if i + 1 < n_layers {
            h.mapv_inplace(f64::tanh);
        }
    }
    h
}

/// Verify that every value in a gradient or loss is finite.
pub fn check_finite(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite value in {context}")))
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences, sampled over `n_samples` randomly chosen scalar parameters.
///
/// `loss` must be a pure function of the parameter set. Entries whose
/// analytic and numeric gradients are both below `1e-10` are treated as
/// matching.
pub fn max_rel_grad_error<F>(
    params: &ParamSet,
    grads: &ParamGrads,
    loss: F,
    n_samples: usize,
    seed: u64,
) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let total = params.n_scalars();
    let mut rng = crate::seeding::rng_from_seed(seed);
    let mut worst = 0.0_f64;
    let h = 1e-5;
    for _ in 0..n_samples {
        let idx = rng.gen_range(0..total);
        let name = params.flat_owner(idx).to_string();
        // Flat offset within the owning tensor.
        let mut offset = idx;
        for (n, v) in params.iter() {
            if n == name {
                break;
            }
            offset -= v.len();
        }
        let base = params.flat_get(idx);

        let mut p_plus = params.clone();
        p_plus.flat_set(idx, base + h);
        let mut p_minus = params.clone();
        p_minus.flat_set(idx, base - h);
        let numeric = (loss(&p_plus) - loss(&p_minus)) / (2.0 * h);

        let gt = grads
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| {
                let c = g.ncols();
                g[[offset / c, offset % c]]
            })
            .unwrap_or(0.0);

        let denom = numeric.abs().max(gt.abs());
        if denom < 1e-10 {
            continue;
        }
        worst = worst.max((numeric - gt).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;

    #[test]
    fn tape_and_plain_forward_are_bitwise_equal() {
        let mut rng = rng_from_seed(3);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "net", &[6, 5, 4], &mut rng);
        let x = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));

        let plain = mlp_forward_plain(&params, "net", 2, &x);

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &params);
        let xi = tape.leaf(x.clone());
        let out = mlp_forward_tape(&mut tape, &binding, "net", 2, xi);

        let taped = tape.value(out);
        assert_eq!(plain.shape(), taped.shape());
        for (a, b) in plain.iter().zip(taped.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flat_indexing_round_trips() {
        let mut rng = rng_from_seed(5);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "net", &[3, 2], &mut rng);
        let n = params.n_scalars();
        assert_eq!(n, 3 * 2 + 2);
        for i in 0..n {
            let v = params.flat_get(i);
            params.flat_set(i, v + 1.0);
            assert_eq!(params.flat_get(i), v + 1.0);
        }
    }

    #[test]
    fn mlp_grads_match_fd_through_helper() {
        let mut rng = rng_from_seed(7);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "net", &[4, 8, 2], &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));

        let loss_fn = |p: &ParamSet| {
            let out = mlp_forward_plain(p, "net", 2, &x);
            (&out - &target).mapv(|d| d * d).mean().unwrap()
        };

        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, &params);
        let xi = tape.leaf(x.clone());
        let out = mlp_forward_tape(&mut tape, &binding, "net", 2, xi);
        let ti = tape.leaf(target.clone());
        let diff = tape.sub(out, ti);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let node_grads = tape.backward(loss);
        let grads = binding.grads(&params, &node_grads);

        let err = max_rel_grad_error(&params, &grads, loss_fn, 40, 99);
        assert!(err < 1e-5, "max rel grad error {err}");
    }
}

//! Gradient-descent optimizers over [`ParamSet`]s.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nn::{ParamGrads, ParamSet};

/// Which optimizer a training loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Set of parameter names excluded from updates.
#[derive(Debug, Clone, Default)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        FreezeMask::default()
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen.len()
    }
}

enum State {
    Sgd {
        momentum: f64,
        velocity: Vec<(String, Array2<f64>)>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<(String, Array2<f64>)>,
        v: Vec<(String, Array2<f64>)>,
    },
}

/// Stateful optimizer; one instance per training run.
pub struct Optimizer {
    lr: f64,
    state: State,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer {
            lr,
            state: State::Sgd {
                momentum,
                velocity: Vec::new(),
            },
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            lr,
            state: State::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr, momentum),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update. Frozen parameters are left untouched (their
    /// optimizer state does not advance either).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads, freeze: &FreezeMask) {
        match &mut self.state {
            State::Sgd { momentum, velocity } => {
                for (name, g) in grads {
                    if freeze.is_frozen(name) {
                        continue;
                    }
                    let vel = lookup_or_zero(velocity, name, g);
                    *vel = &*vel * *momentum + g;
                    let p = params.get_mut(name);
                    *p = &*p - &(&*vel * self.lr);
                }
            }
            State::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let t = *step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for (name, g) in grads {
                    if freeze.is_frozen(name) {
                        continue;
                    }
                    let mi = lookup_or_zero(m, name, g);
                    *mi = &*mi * *beta1 + &(g * (1.0 - *beta1));
                    let m_hat = &*mi / bc1;
                    let vi = lookup_or_zero(v, name, g);
                    *vi = &*vi * *beta2 + &(g.mapv(|x| x * x) * (1.0 - *beta2));
                    let v_hat = &*vi / bc2;
                    let p = params.get_mut(name);
                    let update = &m_hat / &(v_hat.mapv(f64::sqrt) + *eps);
                    *p = &*p - &(update * self.lr);
                }
            }
        }
    }
}

fn lookup_or_zero<'a>(
    store: &'a mut Vec<(String, Array2<f64>)>,
    name: &str,
    like: &Array2<f64>,
) -> &'a mut Array2<f64> {
    if let Some(pos) = store.iter().position(|(n, _)| n == name) {
        return &mut store[pos].1;
    }
    store.push((name.to_string(), Array2::zeros(like.raw_dim())));
    &mut store.last_mut().unwrap().1
}

//! First-order optimizers over flat parameter lists.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta { lr: f64, rho: f64, eps: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adadelta() -> Self {
        Self::Adadelta {
            lr: 1.0,
            rho: 0.9,
            eps: 1e-6,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adadelta()
    }
}

/// Per-parameter optimizer state for one list of parameter slices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        Self {
            kind,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; `grads[k]` of `None` leaves `params[k]` as is.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), self.first.len());
        self.steps += 1;
        let t = self.steps as i32;
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[k] else { continue };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            match self.kind {
                OptimizerKind::Adadelta { lr, rho, eps } => {
                    // m accumulates squared gradients, v squared updates
                    for i in 0..p.len() {
                        m[i] = rho * m[i] + (1.0 - rho) * g[i] * g[i];
                        let dx = -((v[i] + eps).sqrt() / (m[i] + eps).sqrt()) * g[i];
                        v[i] = rho * v[i] + (1.0 - rho) * dx * dx;
                        p[i] += lr * dx;
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

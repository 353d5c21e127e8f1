use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd => true,
            OptimizerKind::Momentum { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(RcuError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First-order optimizer over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[&Matrix]) -> Result<Self> {
        kind.validate()?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(RcuError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = || params.iter().map(|p| Matrix::zeros(p.nrows(), p.ncols())).collect::<Vec<_>>();
        let v = if matches!(kind, OptimizerKind::Adam { .. }) { zeros() } else { Vec::new() };
        Ok(Optimizer { kind, lr, step: 0, m: zeros(), v })
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.zip_apply(g, |pi, gi| *pi -= lr * gi);
                }
            }
            OptimizerKind::Momentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m *= momentum;
                    *m += g;
                    p.zip_apply(m, |pi, mi| *pi -= lr * mi);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    m.zip_apply(g, |mi, gi| *mi = beta1 * *mi + (1.0 - beta1) * gi);
                    v.zip_apply(g, |vi, gi| *vi = beta2 * *vi + (1.0 - beta2) * gi * gi);
                    for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                        *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

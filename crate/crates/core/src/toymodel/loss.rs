use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{RcuError, Result};
use crate::lora::{ortho_axes_loss_with, skew_loss, FrozenComposite, Lambdas, LoraPair, LossGrad, SkewMode};
use crate::matrix::Matrix;

/// Replacement targets for unlearning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    #[default]
    Refuse,
    /// Uniform random task labels (never REFUSE).
    RandomLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnBatch {
    pub inputs: Vec<Vec<usize>>,
    pub y_prime: Vec<usize>,
    pub request_index: usize,
}

impl UnlearnBatch {
    pub fn from_dataset<R: Rng + ?Sized>(
        ds: &Dataset,
        policy: TargetPolicy,
        num_labels: usize,
        request_index: usize,
        rng: &mut R,
    ) -> Self {
        let y_prime = ds
            .iter()
            .map(|_| match policy {
                TargetPolicy::Refuse => num_labels,
                TargetPolicy::RandomLabels => rng.random_range(0..num_labels),
            })
            .collect();
        UnlearnBatch { inputs: ds.iter().map(|s| s.tokens.clone()).collect(), y_prime, request_index }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

const NORMALIZATION_TOL: f64 = 1e-6;

/// Mean negative log-likelihood of `targets` under row log-probabilities
/// (N x C). The gradient is taken w.r.t. the logits that produced them:
/// `(softmax - onehot) / N`.
pub fn ce_unlearn_loss(logprobs: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logprobs.shape();
    if n == 0 || n != targets.len() {
        return Err(RcuError::shape("ce_unlearn_loss", format!("{n} rows for {} targets", targets.len())));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(RcuError::domain("ce_unlearn_loss", format!("target {t} outside {c} classes")));
        }
        let row = logprobs.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        if !(lse.abs() <= NORMALIZATION_TOL) {
            return Err(RcuError::pre("ce_unlearn_loss", format!("row {i} has log-sum-exp {lse}")));
        }
        total -= row[t];
        for j in 0..c {
            grad[(i, j)] = row[j].exp() / n as f64;
        }
        grad[(i, t)] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Value and gradients of the weighted objective for one request.
#[derive(Debug, Clone)]
pub struct OverallLoss {
    pub total: f64,
    pub l_sk: f64,
    pub l_o: f64,
    pub l_ce: f64,
    /// Gradients of the two adapter regularizers, one per pair.
    pub pair_grads: Vec<LossGrad>,
    /// Gradient of the weighted CE term w.r.t. the logits.
    pub grad_logits: Matrix,
}

/// `l1 * L_Sk + l2 * L_o + l3 * L_CE`, with the regularizers summed over
/// adapted weights. `frozen[i]` is the previous request's composite for
/// `pairs[i]`.
pub fn overall_loss(
    pairs: &[LoraPair],
    frozen: Option<&[FrozenComposite]>,
    logprobs: &Matrix,
    batch: &UnlearnBatch,
    lambdas: Lambdas,
    mode: SkewMode,
) -> Result<OverallLoss> {
    lambdas.validate()?;
    if let Some(f) = frozen {
        if f.len() != pairs.len() {
            return Err(RcuError::Config(format!("{} frozen composites for {} adapters", f.len(), pairs.len())));
        }
    }
    let (l_ce, g_ce) = ce_unlearn_loss(logprobs, &batch.y_prime)?;
    let mut l_sk = 0.0;
    let mut l_o = 0.0;
    let mut pair_grads = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut g = LossGrad::zero(pair);
        if mode == SkewMode::Soft {
            let sk = skew_loss(pair)?;
            l_sk += sk.value;
            if lambdas.skew > 0.0 {
                g.grad_b += sk.grad_b * lambdas.skew;
                g.grad_a += sk.grad_a * lambdas.skew;
            }
        }
        let prev = frozen.map(|f| &f[i]);
        if let Some(p) = prev {
            if p.layer_id() != pair.layer_id {
                return Err(RcuError::Config(format!("frozen composite {} paired with {}", p.layer_id(), pair.layer_id)));
            }
        }
        let o = ortho_axes_loss_with(pair, prev, mode)?;
        l_o += o.value;
        if lambdas.ortho > 0.0 {
            g.grad_b += o.grad_b * lambdas.ortho;
            g.grad_a += o.grad_a * lambdas.ortho;
        }
        pair_grads.push(g);
    }
    Ok(OverallLoss {
        total: lambdas.skew * l_sk + lambdas.ortho * l_o + lambdas.ce * l_ce,
        l_sk,
        l_o,
        l_ce,
        pair_grads,
        grad_logits: g_ce * lambdas.ce,
    })
}

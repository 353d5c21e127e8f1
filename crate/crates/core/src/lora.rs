//! Rotation-controlled low-rank adapters.
//!
//! An adapter pair `(B, A)` on a square weight `W` is applied multiplicatively,
//! `W <- (I + beta * BA) W`. Keeping `BA` close to skew-symmetric makes
//! `I + BA` a first-order rotation, so `beta` scales every rotation angle.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};
use crate::matrix::{ensure_finite, ensure_same_shape, ensure_square, frobenius_sq, Archive, Matrix};
use crate::rotmath::gen::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
        }
    }
}

/// Identifies one adapted base weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub proj: Projection,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.proj {
            Projection::Query => "wq",
            Projection::Key => "wk",
            Projection::Value => "wv",
        };
        write!(f, "block{}.{}", self.block, p)
    }
}

/// Loss weights `(skew, orthogonal axes, cross-entropy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub skew: f64,
    pub ortho: f64,
    pub ce: f64,
}

impl Lambdas {
    /// Question-answering preset.
    pub const QA: Lambdas = Lambdas { skew: 0.1, ortho: 0.1, ce: 1.0 };
    /// Generation preset.
    pub const GEN: Lambdas = Lambdas { skew: 0.01, ortho: 0.5, ce: 1.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("skew", self.skew), ("ortho", self.ortho), ("ce", self.ce)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RcuError::Config(format!("lambda {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the trainable factors produce the composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkewMode {
    /// Composite is `BA`; skewness only encouraged by the skew loss.
    #[default]
    Soft,
    /// Composite is `BA - (BA)^T`, skew by construction.
    Hard,
}

impl SkewMode {
    pub fn composite(self, ba: Matrix) -> Matrix {
        match self {
            SkewMode::Soft => ba,
            SkewMode::Hard => {
                let t = ba.transpose();
                ba - t
            }
        }
    }

    /// Maps a gradient w.r.t. the composite back to a gradient w.r.t. `BA`.
    pub fn pull_back(self, g: Matrix) -> Matrix {
        self.composite(g)
    }
}

/// Trainable factors `B` (U x K) and `A` (K x U) for one adapted weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub b: Matrix,
    pub a: Matrix,
    pub layer_id: LayerId,
}

impl LoraPair {
    pub fn new(b: Matrix, a: Matrix, layer_id: LayerId) -> Result<Self> {
        let pair = LoraPair { b, a, layer_id };
        pair.validate()?;
        Ok(pair)
    }

    /// Standard LoRA start: `B = 0`, `A` Gaussian, so `BA = 0`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rank: usize, a_std: f64, layer_id: LayerId, rng: &mut R) -> Self {
        LoraPair { b: Matrix::zeros(dim, rank), a: gaussian(rank, dim, a_std, rng), layer_id }
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (u, k) = self.b.shape();
        if self.a.shape() != (k, u) {
            return Err(RcuError::shape("LoraPair", format!("B is {u}x{k} but A is {:?}", self.a.shape())));
        }
        if k > u || k == 0 {
            return Err(RcuError::shape("LoraPair", format!("rank {k} must be in 1..={u}")));
        }
        ensure_finite(&self.b, "LoraPair.B")?;
        ensure_finite(&self.a, "LoraPair.A")
    }
}

/// Value of a loss plus its gradients w.r.t. `B` and `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad_b: Matrix,
    pub grad_a: Matrix,
}

impl LossGrad {
    pub fn zero(pair: &LoraPair) -> Self {
        LossGrad {
            value: 0.0,
            grad_b: Matrix::zeros(pair.b.nrows(), pair.b.ncols()),
            grad_a: Matrix::zeros(pair.a.nrows(), pair.a.ncols()),
        }
    }

    /// Chain rule from a gradient `g` w.r.t. the product `BA`.
    pub fn from_product_grad(value: f64, pair: &LoraPair, g: &Matrix) -> Self {
        LossGrad { value, grad_b: g * pair.a.transpose(), grad_a: pair.b.transpose() * g }
    }
}

/// `BA`.
pub fn compose(pair: &LoraPair) -> Result<Matrix> {
    pair.validate()?;
    Ok(&pair.b * &pair.a)
}

/// `||BA + (BA)^T||_F^2 / ||BA||_F^2`, or 0 for a zero composite.
pub fn skew_ratio(ba: &Matrix) -> f64 {
    let denom = frobenius_sq(ba);
    if denom == 0.0 {
        0.0
    } else {
        frobenius_sq(&(ba + ba.transpose())) / denom
    }
}

/// Skew loss `||(BA)^T + BA||_F^2`.
///
/// With `S = BA + (BA)^T`, `dL/d(BA) = 4S`, hence `dL/dB = 4 S A^T` and
/// `dL/dA = 4 B^T S`.
pub fn skew_loss(pair: &LoraPair) -> Result<LossGrad> {
    let m = compose(pair)?;
    let s = &m + m.transpose();
    let value = frobenius_sq(&s);
    Ok(LossGrad::from_product_grad(value, pair, &(s * 4.0)))
}

/// Composite of an earlier request, frozen once that request completes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenComposite {
    ba_prev: Matrix,
    request_index: usize,
    layer_id: LayerId,
}

impl FrozenComposite {
    pub fn new(ba_prev: Matrix, request_index: usize, layer_id: LayerId) -> Result<Self> {
        ensure_square(&ba_prev, "FrozenComposite")?;
        if request_index == 0 {
            return Err(RcuError::domain("FrozenComposite", "request indices start at 1"));
        }
        Ok(FrozenComposite { ba_prev, request_index, layer_id })
    }

    pub fn from_pair(pair: &LoraPair, mode: SkewMode, request_index: usize) -> Result<Self> {
        FrozenComposite::new(mode.composite(compose(pair)?), request_index, pair.layer_id)
    }

    pub fn ba(&self) -> &Matrix {
        &self.ba_prev
    }

    pub fn request_index(&self) -> usize {
        self.request_index
    }

    pub fn layer_id(&self) -> LayerId {
        self.layer_id
    }
}

/// First-order relative rotation between consecutive requests.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRotation {
    /// `I + BA_t - BA_prev`
    pub approx: Matrix,
    /// `||BA_t BA_prev||_F`, the term dropped from `(I + BA_t)(I - BA_prev)`.
    pub second_order_norm: f64,
}

pub fn relative_rotation(ba_t: &Matrix, ba_prev: &Matrix) -> Result<RelativeRotation> {
    let n = ensure_square(ba_t, "relative_rotation")?;
    ensure_same_shape(ba_t, ba_prev, "relative_rotation")?;
    ensure_finite(ba_prev, "relative_rotation")?;
    Ok(RelativeRotation {
        approx: Matrix::identity(n, n) + ba_t - ba_prev,
        second_order_norm: (ba_t * ba_prev).norm(),
    })
}

/// Orthogonal rotation axes loss `||(I + M - P) P||_F^2` with `M` the current
/// composite and `P` the frozen previous one.
///
/// `dL/dM = 2 (I + M - P) P P^T`; `P` receives no gradient. Without a
/// predecessor the loss is identically zero.
pub fn ortho_axes_loss(pair: &LoraPair, frozen: Option<&FrozenComposite>) -> Result<LossGrad> {
    ortho_axes_loss_with(pair, frozen, SkewMode::Soft)
}

pub fn ortho_axes_loss_with(pair: &LoraPair, frozen: Option<&FrozenComposite>, mode: SkewMode) -> Result<LossGrad> {
    let Some(frozen) = frozen else {
        pair.validate()?;
        return Ok(LossGrad::zero(pair));
    };
    let m = mode.composite(compose(pair)?);
    let p = frozen.ba();
    ensure_same_shape(&m, p, "ortho_axes_loss")?;
    let n = m.nrows();
    let resid = (Matrix::identity(n, n) + &m - p) * p;
    let value = frobenius_sq(&resid);
    let g = mode.pull_back(resid * p.transpose() * 2.0);
    Ok(LossGrad::from_product_grad(value, pair, &g))
}

/// `(I + beta * M) W` for a precomputed composite `M`; `beta = 0` returns `W` unchanged.
pub fn materialize_composite(w: &Matrix, composite: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(RcuError::domain("materialize", format!("beta must be finite and >= 0, got {beta}")));
    }
    ensure_square(composite, "materialize")?;
    if composite.ncols() != w.nrows() {
        return Err(RcuError::shape("materialize", format!("composite {:?} vs weight {:?}", composite.shape(), w.shape())));
    }
    if beta == 0.0 {
        return Ok(w.clone());
    }
    Ok(w + (composite * w) * beta)
}

/// `(I + beta * BA) W`.
pub fn materialize(w: &Matrix, pair: &LoraPair, beta: f64) -> Result<Matrix> {
    materialize_composite(w, &compose(pair)?, beta)
}

/// Standard additive LoRA update `W + BA`.
pub fn additive_baseline(w: &Matrix, pair: &LoraPair) -> Result<Matrix> {
    let m = compose(pair)?;
    ensure_same_shape(w, &m, "additive_baseline")?;
    Ok(w + m)
}

/// Metadata stored alongside adapter factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub request_index: usize,
    pub layer_id: LayerId,
    pub rank: usize,
    pub lambdas: Lambdas,
}

/// Adapter checkpoint: one metadata record per pair plus `B`/`A` entries.
pub fn adapters_to_archive(request_index: usize, pairs: &[LoraPair], lambdas: Lambdas) -> Archive {
    let metas: Vec<AdapterMeta> = pairs
        .iter()
        .map(|p| AdapterMeta { request_index, layer_id: p.layer_id, rank: p.rank(), lambdas })
        .collect();
    let mut ar = Archive::new(serde_json::json!({ "kind": "adapters", "pairs": metas }));
    for p in pairs {
        ar.push(format!("{}.B", p.layer_id), p.b.clone());
        ar.push(format!("{}.A", p.layer_id), p.a.clone());
    }
    ar
}

pub fn adapters_from_archive(ar: &Archive) -> Result<(Vec<AdapterMeta>, Vec<LoraPair>)> {
    let metas: Vec<AdapterMeta> = serde_json::from_value(
        ar.meta.get("pairs").cloned().ok_or_else(|| RcuError::Format("adapter archive without pairs".into()))?,
    )?;
    let pairs = metas
        .iter()
        .map(|m| {
            LoraPair::new(
                ar.get(&format!("{}.B", m.layer_id))?.clone(),
                ar.get(&format!("{}.A", m.layer_id))?.clone(),
                m.layer_id,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((metas, pairs))
}

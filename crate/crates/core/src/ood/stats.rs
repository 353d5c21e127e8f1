use nalgebra::{Cholesky, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};
use crate::matrix::Matrix;

/// Mean and regularized covariance of one layer's ID features.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub mean: DVector<f64>,
    pub cov: Matrix,
    chol: Cholesky<f64, Dyn>,
}

impl PartialEq for LayerStats {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl LayerStats {
    /// Fits on the rows of `feats`, adding `eps_rel * trace / d` to the diagonal.
    pub fn fit(feats: &Matrix, eps_rel: f64) -> Result<Self> {
        let (n, d) = feats.shape();
        if n == 0 {
            return Err(RcuError::degenerate("layer_stats", "no features"));
        }
        let mean = DVector::from_fn(d, |j, _| feats.column(j).mean());
        let mut centered = feats.clone();
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / n as f64;
        let mut eps = eps_rel * cov.trace() / d as f64;
        if !(eps > 0.0) {
            eps = eps_rel.max(f64::EPSILON);
        }
        for i in 0..d {
            cov[(i, i)] += eps;
        }
        Self::from_parts(mean, cov)
    }

    pub fn from_parts(mean: DVector<f64>, cov: Matrix) -> Result<Self> {
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| RcuError::Numeric { op: "layer_stats", detail: "covariance not positive definite".into() })?;
        Ok(LayerStats { mean, cov, chol })
    }

    /// `(f - mu)^T Sigma^{-1} (f - mu)`.
    pub fn mahalanobis(&self, f: &DVector<f64>) -> f64 {
        let diff = f - &self.mean;
        let y = self.chol.l().solve_lower_triangular(&diff).expect("Cholesky factor is invertible");
        y.norm_squared()
    }
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = a.norm() * b.norm();
    if d == 0.0 {
        0.0
    } else {
        a.dot(b) / d
    }
}

/// Hypersphere boundary fitted to ID score vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypersphere {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SphereFit {
    /// Center at the mean, radius at the `q`-quantile of distances.
    Quantile { q: f64 },
    /// Soft-margin minimum enclosing ball with linear kernel; `nu` bounds the outlier fraction.
    Svdd { nu: f64 },
}

pub const MIN_SPHERE_POINTS: usize = 8;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Hypersphere {
    pub fn fit(points: &[Vec<f64>], how: SphereFit) -> Result<Self> {
        if points.len() < MIN_SPHERE_POINTS {
            return Err(RcuError::degenerate("fit_hypersphere", format!("{} points; need {MIN_SPHERE_POINTS}", points.len())));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(RcuError::shape("fit_hypersphere", "score vectors differ in length"));
        }
        match how {
            SphereFit::Quantile { q } => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(RcuError::Config(format!("hypersphere quantile {q} outside (0, 1]")));
                }
                let n = points.len() as f64;
                let center: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
                let mut d: Vec<f64> = points.iter().map(|p| dist(p, &center)).collect();
                d.sort_by(f64::total_cmp);
                let k = ((q * n).ceil() as usize).clamp(1, d.len()) - 1;
                Ok(Hypersphere { center, radius: d[k] })
            }
            SphereFit::Svdd { nu } => svdd(points, nu),
        }
    }

    /// `||s - c|| - r`; negative inside.
    pub fn boundary_distance(&self, s: &[f64]) -> f64 {
        dist(s, &self.center) - self.radius
    }
}

/// Dual of the soft-margin ball problem, `min a^T K a - sum_i a_i K_ii` with
/// `sum a = 1`, `0 <= a_i <= 1/(nu n)`, solved by pairwise coordinate steps.
fn svdd(points: &[Vec<f64>], nu: f64) -> Result<Hypersphere> {
    let n = points.len();
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(RcuError::Config(format!("SVDD nu {nu} outside (0, 1]")));
    }
    let c = (1.0 / (nu * n as f64)).max(1.0 / n as f64);
    let k = Matrix::from_fn(n, n, |i, j| points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum());
    let mut alpha = DVector::from_element(n, 1.0 / n as f64);
    let mut ka = &k * &alpha;
    for _ in 0..(100 * n).max(10_000) {
        let grad = |i: usize, ka: &DVector<f64>| 2.0 * ka[i] - k[(i, i)];
        let (mut up, mut down) = (None, None);
        for i in 0..n {
            let g = grad(i, &ka);
            if alpha[i] < c - 1e-15 && up.is_none_or(|(_, gu)| g < gu) {
                up = Some((i, g));
            }
            if alpha[i] > 1e-15 && down.is_none_or(|(_, gd)| g > gd) {
                down = Some((i, g));
            }
        }
        let (Some((i, gi)), Some((j, gj))) = (up, down) else { break };
        if gj - gi < 1e-12 {
            break;
        }
        let curv = k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)];
        let mut t = if curv > 0.0 { (gj - gi) / (2.0 * curv) } else { f64::INFINITY };
        t = t.min(c - alpha[i]).min(alpha[j]);
        alpha[i] += t;
        alpha[j] -= t;
        for r in 0..n {
            ka[r] += t * (k[(r, i)] - k[(r, j)]);
        }
    }
    let dim = points[0].len();
    let center: Vec<f64> = (0..dim).map(|d| (0..n).map(|i| alpha[i] * points[i][d]).sum()).collect();
    let dists: Vec<f64> = points.iter().map(|p| dist(p, &center)).collect();
    let free: Vec<f64> = (0..n).filter(|&i| alpha[i] > 1e-9 && alpha[i] < c - 1e-9).map(|i| dists[i]).collect();
    let radius = if free.is_empty() {
        let inside = (0..n).filter(|&i| alpha[i] <= 1e-9).map(|i| dists[i]).fold(f64::NEG_INFINITY, f64::max);
        let bound = (0..n).filter(|&i| alpha[i] > 1e-9).map(|i| dists[i]).fold(f64::INFINITY, f64::min);
        match (inside.is_finite(), bound.is_finite()) {
            (true, true) => 0.5 * (inside + bound),
            (true, false) => inside,
            _ => bound,
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    Ok(Hypersphere { center, radius })
}

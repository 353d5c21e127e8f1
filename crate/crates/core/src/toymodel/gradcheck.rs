use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RcuError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates compared; all of them when the parameter vector is shorter.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, tolerance: 1e-4, coords: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = 1e-3 * max_i |a_i|`, so coordinates whose true gradient is
/// zero do not turn roundoff into huge ratios.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(RcuError::shape("grad_check", format!("{} params, {} gradient entries", params.len(), analytic.len())));
    }
    if !(1e-7..=1e-4).contains(&cfg.step) {
        return Err(RcuError::domain("grad_check", format!("step {} outside [1e-7, 1e-4]", cfg.step)));
    }
    let n = params.len();
    let coords: Vec<usize> = if cfg.coords >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed), n, cfg.coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut x = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let up = loss(&x);
        x[i] = orig - cfg.step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = if denom == 0.0 { 0.0 } else { (a - numeric).abs() / denom };
        if !rel.is_finite() {
            return Err(RcuError::NonFinite("grad_check"));
        }
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_coord: worst.1,
        coords_checked: coords.len(),
        passed: worst.0 <= cfg.tolerance,
    })
}

pub fn flatten(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.iter().copied()).collect()
}

/// Inverse of [`flatten`] for matrices shaped like `like`.
pub fn unflatten(xs: &[f64], like: &[&Matrix]) -> Vec<Matrix> {
    let mut off = 0;
    like.iter()
        .map(|m| {
            let len = m.len();
            let out = Matrix::from_column_slice(m.nrows(), m.ncols(), &xs[off..off + len]);
            off += len;
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let a = [3.0, -1.0, 0.5, 2.0];
        let f = |x: &[f64]| x.iter().zip(&a).map(|(xi, ai)| ai * xi * xi + xi).sum::<f64>();
        let x = [0.3, -0.7, 1.1, 0.0];
        let g: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| 2.0 * ai * xi + 1.0).collect();
        let r = grad_check(f, &x, &g, GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.coords_checked, 4);
    }

    #[test]
    fn wrong_gradient_fails() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = grad_check(f, &[1.0], &[3.0], GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn subset_and_step_bounds() {
        let n = 1000;
        let x = vec![0.5; n];
        let g = vec![1.0; n];
        let r = grad_check(|x: &[f64]| x.iter().sum(), &x, &g, GradCheckConfig::default()).unwrap();
        assert_eq!(r.coords_checked, 200);
        let bad = GradCheckConfig { step: 1e-2, ..Default::default() };
        assert!(grad_check(|x: &[f64]| x[0], &[0.0], &[1.0], bad).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let a = Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let b = Matrix::from_fn(1, 2, |_, j| -(j as f64));
        let flat = flatten(&[&a, &b]);
        assert_eq!(unflatten(&flat, &[&a, &b]), vec![a, b]);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{RcuError, Result};

pub const MIN_MIXTURE_POINTS: usize = 16;
const MAX_ITERS: usize = 1000;
const LL_TOL: f64 = 1e-12;

/// Two-component one-dimensional Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub stds: [f64; 2],
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

fn log_norm_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

impl Mixture {
    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        (0..2).map(|k| self.weights[k] * norm_cdf((x - self.means[k]) / self.stds[k])).sum()
    }

    /// `P(X > x)`, accurate far into the right tail.
    pub fn sf(&self, x: f64) -> f64 {
        (0..2).map(|k| self.weights[k] * norm_sf((x - self.means[k]) / self.stds[k])).sum()
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                log_sum_exp(
                    self.weights[0].ln() + log_norm_pdf(x, self.means[0], self.stds[0]),
                    self.weights[1].ln() + log_norm_pdf(x, self.means[1], self.stds[1]),
                )
            })
            .sum()
    }

    /// EM from several deterministic splits of the sorted data; keeps the best
    /// log-likelihood.
    pub fn fit(xs: &[f64]) -> Result<Self> {
        if xs.len() < MIN_MIXTURE_POINTS {
            return Err(RcuError::degenerate("fit_mixture", format!("{} values; need {MIN_MIXTURE_POINTS}", xs.len())));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(RcuError::NonFinite("fit_mixture"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
            return Err(RcuError::degenerate("fit_mixture", "values have zero variance"));
        }
        let floor = 1e-3 * var.sqrt();
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut best: Option<(f64, Mixture)> = None;
        for split in [0.5, 0.25, 0.75, 0.1, 0.9] {
            let cut = ((split * n) as usize).clamp(1, xs.len() - 1);
            let (lo, hi) = sorted.split_at(cut);
            let stats = |s: &[f64]| {
                let m = s.iter().sum::<f64>() / s.len() as f64;
                let v = s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s.len() as f64;
                (m, v.sqrt().max(floor))
            };
            let (m0, s0) = stats(lo);
            let (m1, s1) = stats(hi);
            let init = Mixture { weights: [lo.len() as f64 / n, hi.len() as f64 / n], means: [m0, m1], stds: [s0, s1] };
            let fit = em(xs, init, floor);
            let ll = fit.log_likelihood(xs);
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, fit));
            }
        }
        let (_, mut m) = best.expect("at least one restart");
        if m.means[0] > m.means[1] {
            m.weights.swap(0, 1);
            m.means.swap(0, 1);
            m.stds.swap(0, 1);
        }
        Ok(m)
    }
}

fn em(xs: &[f64], mut m: Mixture, floor: f64) -> Mixture {
    let mut prev = f64::NEG_INFINITY;
    let mut resp = vec![0.0; xs.len()];
    for _ in 0..MAX_ITERS {
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(xs) {
            let a = m.weights[0].ln() + log_norm_pdf(x, m.means[0], m.stds[0]);
            let b = m.weights[1].ln() + log_norm_pdf(x, m.means[1], m.stds[1]);
            let z = log_sum_exp(a, b);
            ll += z;
            *r = (a - z).exp();
        }
        let mut next = m;
        for k in 0..2 {
            let w: Vec<f64> = resp.iter().map(|&r| if k == 0 { r } else { 1.0 - r }).collect();
            let nk: f64 = w.iter().sum();
            if nk <= 1e-12 {
                continue;
            }
            let mean = w.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() / nk;
            let var = w.iter().zip(xs).map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>() / nk;
            next.weights[k] = nk / xs.len() as f64;
            next.means[k] = mean;
            next.stds[k] = var.sqrt().max(floor);
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];
        m = next;
        if (ll - prev).abs() <= LL_TOL * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
    }
    m
}

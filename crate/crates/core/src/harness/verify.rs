//! Randomized numerical suites behind `rcu verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::run::sub_seed;
use crate::error::Result;
use crate::lora::{ortho_axes_loss, skew_loss, FrozenComposite, Lambdas, LayerId, LoraPair, LossGrad, Projection, SkewMode};
use crate::matrix::Matrix;
use crate::ood::{cel_loss, mlm_loss, ua_loss};
use crate::par::Exec;
use crate::rotmath::gen::{gaussian, random_orthogonal, random_skew, skew_from_angles};
use crate::rotmath::{small_angle_error, verify_theorem1, verify_theorem2};
use crate::toymodel::gradcheck::{flatten, grad_check, unflatten, GradCheckConfig};
use crate::toymodel::{AdapterStack, Composition, RequestObjective, ToyAttentionModel, ToyModelShape, UnlearnBatch, UpdateKind};

/// Count of cases and failures for one randomized suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen (absolute or relative, per suite).
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

const DIMS: [usize; 3] = [4, 8, 16];
const SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Angles of `exp(kC)` against `k` times the angles of `C` for random skew `C`
/// with `||C||_F <= 0.1`.
pub fn theorem1_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let tol = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let n = DIMS[i % DIMS.len()];
        let c = random_skew(n, rng.random_range(1e-3..=0.1), &mut rng);
        let r = verify_theorem1(&c, &SCALES, tol)?;
        worst = worst.max(r.max_abs_error);
        failures += usize::from(!r.passed);
    }
    Ok(SuiteReport { name: "theorem1".into(), cases, failures, worst, tolerance: tol })
}

/// `pairs` generators on disjoint planes (must pass) and `pairs` sharing a plane (must fail).
pub fn theorem2_suite(seed: u64, pairs: usize) -> Result<SuiteReport> {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let n = DIMS[i % DIMS.len()];
        let planes = n / 2;
        let q = random_orthogonal(n, &mut rng);
        let split = rng.random_range(1..planes);
        let mut angle = || rng.random_range(0.05..1.0);
        let a: Vec<f64> = (0..planes).map(|p| if p < split { angle() } else { 0.0 }).collect();
        let b: Vec<f64> = (0..planes).map(|p| if p >= split { angle() } else { 0.0 }).collect();
        let (c, cp) = (skew_from_angles(n, &a, &q), skew_from_angles(n, &b, &q));
        let r = verify_theorem2(&c, &cp, tol)?;
        worst = worst.max(r.product_norm).max(r.max_cross_dot).max(r.commute_error.unwrap_or(f64::INFINITY) / 10.0);
        failures += usize::from(!r.passed);

        let mut shared = b.clone();
        shared[0] = rng.random_range(0.05..1.0);
        let r = verify_theorem2(&c, &skew_from_angles(n, &shared, &q), tol)?;
        failures += usize::from(r.passed);
    }
    Ok(SuiteReport { name: "theorem2".into(), cases: 2 * pairs, failures, worst, tolerance: tol })
}

/// `||exp(C) - I - C||_F <= ||C||_F^2 e^{||C||_F} / 2` for `||C||_F` log-uniform in `[1e-4, 0.3]`.
pub fn taylor_suite(seed: u64, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let f = 10f64.powf(rng.random_range(-4.0..=0.3f64.log10()));
        let c = random_skew(DIMS[i % DIMS.len()], f, &mut rng);
        let bound = 0.5 * f * f * f.exp();
        let ratio = small_angle_error(&c)? / bound;
        worst = worst.max(ratio);
        failures += usize::from(ratio > 1.0);
    }
    Ok(SuiteReport { name: "taylor_bound".into(), cases, failures, worst, tolerance: 1.0 })
}

struct GradCase {
    params: Vec<Matrix>,
    analytic: Vec<Matrix>,
    loss: Box<dyn Fn(&[Matrix]) -> f64>,
}

fn pair_case(rng: &mut ChaCha8Rng) -> LoraPair {
    let d = rng.random_range(3..=8);
    let k = rng.random_range(1..=3.min(d));
    let id = LayerId { block: 0, proj: Projection::Query };
    LoraPair { b: gaussian(d, k, 0.5, rng), a: gaussian(k, d, 0.5, rng), layer_id: id }
}

fn pair_loss_case(pair: LoraPair, f: impl Fn(&LoraPair) -> Result<LossGrad> + 'static) -> Result<GradCase> {
    let g = f(&pair)?;
    let id = pair.layer_id;
    Ok(GradCase {
        params: vec![pair.b, pair.a],
        analytic: vec![g.grad_b, g.grad_a],
        loss: Box::new(move |m| f(&LoraPair { b: m[0].clone(), a: m[1].clone(), layer_id: id }).map_or(f64::NAN, |g| g.value)),
    })
}

fn ce_case(rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let shape = ToyModelShape { vocab_size: 10, embed_dim: rng.random_range(4..=6), num_blocks: 2, num_labels: 3 };
    let model = ToyAttentionModel::init(shape, rng)?;
    let rank = rng.random_range(1..=2);
    let pairs: Vec<LoraPair> = model
        .layer_ids()
        .into_iter()
        .map(|id| LoraPair { b: gaussian(shape.embed_dim, rank, 0.3, rng), a: gaussian(rank, shape.embed_dim, 0.3, rng), layer_id: id })
        .collect();
    let n = rng.random_range(2..=5);
    let inputs = (0..n).map(|_| (0..rng.random_range(2..6)).map(|_| rng.random_range(0..10)).collect()).collect();
    let y_prime = (0..n).map(|_| rng.random_range(0..shape.num_classes())).collect();
    let batch = UnlearnBatch { inputs, y_prime, request_index: 1 };
    let stack = AdapterStack::new(Composition::Stacked, UpdateKind::Multiplicative);
    let lam = Lambdas { skew: 0.0, ortho: 0.0, ce: 1.0 };
    let obj = RequestObjective::new(&model, &stack, 0.0, 0.45, None, lam, SkewMode::Soft)?;
    let (_, grads) = obj.evaluate(&model, &pairs, &batch, Exec::Sequential)?;
    let ids: Vec<_> = pairs.iter().map(|p| p.layer_id).collect();
    Ok(GradCase {
        params: pairs.iter().flat_map(|p| [p.b.clone(), p.a.clone()]).collect(),
        analytic: grads.into_iter().flat_map(|g| [g.grad_b, g.grad_a]).collect(),
        loss: Box::new(move |m| {
            let probe: Vec<LoraPair> = ids
                .iter()
                .enumerate()
                .map(|(i, &layer_id)| LoraPair { b: m[2 * i].clone(), a: m[2 * i + 1].clone(), layer_id })
                .collect();
            obj.evaluate(&model, &probe, &batch, Exec::Sequential).map_or(f64::NAN, |(l, _)| l.l_ce)
        }),
    })
}

fn feature_case(rng: &mut ChaCha8Rng, which: &str) -> Result<GradCase> {
    let layers = rng.random_range(1..=3);
    let n = rng.random_range(3..=6);
    let d = rng.random_range(2..=5);
    let zs: Vec<Matrix> = (0..layers).map(|_| gaussian(n, d, 1.0, rng)).collect();
    Ok(match which {
        "L_Ua" => {
            let (_, g) = ua_loss(&zs)?;
            GradCase { params: zs, analytic: g, loss: Box::new(|m| ua_loss(m).map_or(f64::NAN, |r| r.0)) }
        }
        "L_CEL" => {
            let keys: Vec<Matrix> = (0..layers).map(|_| gaussian(n, d, 1.0, rng)).collect();
            let (_, g) = cel_loss(&zs, &keys)?;
            GradCase { params: zs, analytic: g, loss: Box::new(move |m| cel_loss(m, &keys).map_or(f64::NAN, |r| r.0)) }
        }
        _ => {
            let vocab = rng.random_range(3..=8);
            let logits: Vec<Matrix> = (0..layers).map(|_| gaussian(n, vocab, 1.5, rng)).collect();
            let masks: Vec<Vec<(usize, usize)>> = (0..layers)
                .map(|_| {
                    let mut pos: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
                    if pos.is_empty() {
                        pos.push(rng.random_range(0..n));
                    }
                    pos.into_iter().map(|p| (p, rng.random_range(0..vocab))).collect()
                })
                .collect();
            let (_, g) = mlm_loss(&logits, &masks)?;
            GradCase { params: logits, analytic: g, loss: Box::new(move |m| mlm_loss(m, &masks).map_or(f64::NAN, |r| r.0)) }
        }
    })
}

pub const GRADIENT_LOSSES: [&str; 6] = ["L_Sk", "L_o", "L_CE", "L_Ua", "L_CEL", "L_MLM"];

/// Central-difference checks of every analytic gradient, `cases` random configurations per loss.
pub fn gradient_suite(seed: u64, cases: usize) -> Result<Vec<SuiteReport>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::with_capacity(GRADIENT_LOSSES.len());
    for (li, &name) in GRADIENT_LOSSES.iter().enumerate() {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for i in 0..cases {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, li as u64, i as u64));
            let case = match name {
                "L_Sk" => pair_loss_case(pair_case(&mut rng), skew_loss)?,
                "L_o" => {
                    let pair = pair_case(&mut rng);
                    let d = pair.dim();
                    let prev = FrozenComposite::new(gaussian(d, d, 0.4, &mut rng), 1, pair.layer_id)?;
                    pair_loss_case(pair, move |p| ortho_axes_loss(p, Some(&prev)))?
                }
                "L_CE" => ce_case(&mut rng)?,
                other => feature_case(&mut rng, other)?,
            };
            let like: Vec<&Matrix> = case.params.iter().collect();
            let f = |x: &[f64]| (case.loss)(&unflatten(x, &like));
            let analytic = flatten(&case.analytic.iter().collect::<Vec<_>>());
            let r = grad_check(f, &flatten(&like), &analytic, GradCheckConfig { seed: i as u64, ..cfg })?;
            worst = worst.max(r.max_rel_error);
            failures += usize::from(!r.passed);
        }
        out.push(SuiteReport { name: name.into(), cases, failures, worst, tolerance: cfg.tolerance });
    }
    Ok(out)
}

/// All suites at the sizes used by `rcu verify`.
pub fn verify_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = vec![
        theorem1_suite(sub_seed(seed, 101, 0), 100)?,
        theorem2_suite(sub_seed(seed, 102, 0), 50)?,
        taylor_suite(sub_seed(seed, 103, 0), 100)?,
    ];
    out.extend(gradient_suite(sub_seed(seed, 104, 0), 100)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(theorem1_suite(1, 6).unwrap().passed());
        assert!(theorem2_suite(2, 6).unwrap().passed());
        assert!(taylor_suite(3, 10).unwrap().passed());
        for r in gradient_suite(4, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}

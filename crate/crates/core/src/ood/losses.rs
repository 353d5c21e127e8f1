use crate::error::{RcuError, Result};
use crate::matrix::{frobenius_sq, Matrix};
use crate::toymodel::log_softmax_rows;

const ROW_NORM_FLOOR: f64 = 1e-12;

/// Alignment loss: per layer, rows are scaled to unit length and
/// `(1/d^2) ||Z^T Z / (n-1) - I||_F^2` is summed over layers.
/// Returns the value and the gradient w.r.t. each unnormalized feature matrix.
pub fn ua_loss(layer_features: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layer_features.len());
    for z in layer_features {
        let (n, d) = z.shape();
        if n < 2 {
            return Err(RcuError::degenerate("ua_loss", format!("{n} samples; need at least 2")));
        }
        let mut zh = z.clone();
        let mut norms = Vec::with_capacity(n);
        for mut row in zh.row_iter_mut() {
            let nr = row.norm();
            if !(nr > ROW_NORM_FLOOR) {
                return Err(RcuError::Numeric { op: "ua_loss", detail: "zero-norm feature row".into() });
            }
            row /= nr;
            norms.push(nr);
        }
        let dd = (d * d) as f64;
        let c = zh.transpose() * &zh / (n as f64 - 1.0) - Matrix::identity(d, d);
        total += frobenius_sq(&c) / dd;
        let g_hat = &zh * &c * (4.0 / (dd * (n as f64 - 1.0)));
        let mut g = Matrix::zeros(n, d);
        for i in 0..n {
            let u = zh.row(i);
            let gi = g_hat.row(i);
            let proj = u.dot(&gi);
            g.row_mut(i).copy_from(&((gi - u * proj) / norms[i]));
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Contrastive entropy: per layer, each anchor `i` gets the distribution
/// `softmax_j(<a_i, k_j>)` over the batch's key features, and the loss is the
/// summed entropy of those distributions. Keys receive no gradient.
pub fn cel_loss(anchors: &[Matrix], keys: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    if anchors.len() != keys.len() {
        return Err(RcuError::shape("cel_loss", format!("{} anchor layers, {} key layers", anchors.len(), keys.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(anchors.len());
    for (a, k) in anchors.iter().zip(keys) {
        let n = a.nrows();
        if n < 2 {
            return Err(RcuError::degenerate("cel_loss", format!("batch of {n}; need at least 2")));
        }
        if k.shape() != a.shape() {
            return Err(RcuError::shape("cel_loss", format!("anchors {:?} vs keys {:?}", a.shape(), k.shape())));
        }
        let lp = log_softmax_rows(&(a * k.transpose()));
        let mut g_s = Matrix::zeros(n, n);
        for i in 0..n {
            let h: f64 = -(0..n).map(|j| lp[(i, j)].exp() * lp[(i, j)]).sum::<f64>();
            total += h;
            for j in 0..n {
                let p = lp[(i, j)].exp();
                g_s[(i, j)] = -p * (lp[(i, j)] + h);
            }
        }
        grads.push(g_s * k);
    }
    Ok((total, grads))
}

/// Mean cross-entropy of the original tokens at masked positions.
///
/// `logits[s]` is the token-logit matrix of sample `s`; `masked[s]` lists
/// `(position, original token)` pairs. Returns per-sample logit gradients.
pub fn mlm_loss(logits: &[Matrix], masked: &[Vec<(usize, usize)>]) -> Result<(f64, Vec<Matrix>)> {
    if logits.len() != masked.len() {
        return Err(RcuError::shape("mlm_loss", format!("{} logit sets for {} mask lists", logits.len(), masked.len())));
    }
    let count: usize = masked.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(RcuError::domain("mlm_loss", "no masked positions"));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, ms) in logits.iter().zip(masked) {
        let mut g = Matrix::zeros(z.nrows(), z.ncols());
        for &(pos, tok) in ms {
            if pos >= z.nrows() || tok >= z.ncols() {
                return Err(RcuError::domain("mlm_loss", format!("mask ({pos}, {tok}) outside logits {:?}", z.shape())));
            }
            let lp = log_softmax_rows(&z.rows(pos, 1).into_owned());
            total -= lp[(0, tok)];
            for j in 0..z.ncols() {
                g[(pos, j)] += lp[(0, j)].exp() / count as f64;
            }
            g[(pos, tok)] -= 1.0 / count as f64;
        }
        grads.push(g);
    }
    Ok((total / count as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::gen::gaussian;
    use crate::toymodel::gradcheck::{flatten, grad_check, unflatten, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ua_vanishes_at_identity_covariance() {
        // n = 2, d = 2 rows e1, e2: Z^T Z = I = (n - 1) I
        let z = Matrix::identity(2, 2);
        assert!(ua_loss(&[z]).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn ua_two_identical_rows() {
        let v = [0.6, 0.8];
        let z = Matrix::from_row_slice(2, 2, &[3.0 * v[0], 3.0 * v[1], v[0], v[1]]);
        let vv = Matrix::from_fn(2, 2, |i, j| v[i] * v[j] * 2.0) - Matrix::identity(2, 2);
        let expected = frobenius_sq(&vv) / 4.0;
        assert!((ua_loss(&[z]).unwrap().0 - expected).abs() < 1e-14);
    }

    #[test]
    fn ua_matches_naive_loop_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs = vec![gaussian(6, 4, 1.0, &mut rng), gaussian(6, 4, 1.0, &mut rng)];
        let (v, g) = ua_loss(&zs).unwrap();
        let mut naive = 0.0;
        for z in &zs {
            let (n, d) = z.shape();
            let norms: Vec<f64> = (0..n).map(|i| (0..d).map(|j| z[(i, j)].powi(2)).sum::<f64>().sqrt()).collect();
            for a in 0..d {
                for b in 0..d {
                    let mut c = 0.0;
                    for i in 0..n {
                        c += z[(i, a)] * z[(i, b)] / (norms[i] * norms[i]);
                    }
                    c /= (n - 1) as f64;
                    let e = c - if a == b { 1.0 } else { 0.0 };
                    naive += e * e / (d * d) as f64;
                }
            }
        }
        assert!((v - naive).abs() < 1e-12);
        let refs: Vec<&Matrix> = zs.iter().collect();
        let f = |x: &[f64]| ua_loss(&unflatten(x, &refs)).unwrap().0;
        let r = grad_check(f, &flatten(&refs), &flatten(&g.iter().collect::<Vec<_>>()), GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn ua_guards() {
        assert!(matches!(ua_loss(&[Matrix::from_element(1, 3, 1.0)]), Err(RcuError::Degenerate { .. })));
        assert!(matches!(ua_loss(&[Matrix::zeros(3, 3)]), Err(RcuError::Numeric { .. })));
    }

    #[test]
    fn cel_identical_pair_is_maximal_entropy() {
        let f = Matrix::from_row_slice(2, 3, &[0.2, -0.1, 0.4, 0.2, -0.1, 0.4]);
        let layers = 3;
        let a: Vec<Matrix> = (0..layers).map(|_| f.clone()).collect();
        let (v, _) = cel_loss(&a, &a).unwrap();
        assert!((v - 2.0 * layers as f64 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cel_matches_triple_loop_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = vec![gaussian(5, 3, 1.0, &mut rng), gaussian(5, 3, 1.0, &mut rng)];
        let k = vec![gaussian(5, 3, 1.0, &mut rng), gaussian(5, 3, 1.0, &mut rng)];
        let (v, g) = cel_loss(&a, &k).unwrap();
        let mut naive = 0.0;
        for l in 0..2 {
            for i in 0..5 {
                let s: Vec<f64> = (0..5).map(|j| (0..3).map(|c| a[l][(i, c)] * k[l][(j, c)]).sum()).collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for sj in &s {
                    let p = sj.exp() / z;
                    naive -= p * p.ln();
                }
            }
        }
        assert!((v - naive).abs() < 1e-12);
        let refs: Vec<&Matrix> = a.iter().collect();
        let f = |x: &[f64]| cel_loss(&unflatten(x, &refs), &k).unwrap().0;
        let r = grad_check(f, &flatten(&refs), &flatten(&g.iter().collect::<Vec<_>>()), GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(matches!(cel_loss(&[a[0].rows(0, 1).into_owned()], &[k[0].rows(0, 1).into_owned()]), Err(RcuError::Degenerate { .. })));
    }

    #[test]
    fn mlm_uniform_perfect_and_random() {
        let uniform = Matrix::zeros(4, 16);
        let (v, _) = mlm_loss(&[uniform], &[vec![(1, 3), (2, 9)]]).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
        let mut perfect = Matrix::zeros(3, 16);
        perfect[(0, 5)] = 60.0;
        assert!(mlm_loss(&[perfect], &[vec![(0, 5)]]).unwrap().0 < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs = vec![gaussian(4, 6, 1.5, &mut rng), gaussian(3, 6, 1.5, &mut rng)];
        let masks = vec![vec![(0, 1), (3, 5)], vec![(2, 0)]];
        let (v, g) = mlm_loss(&zs, &masks).unwrap();
        let mut naive = 0.0;
        for (z, ms) in zs.iter().zip(&masks) {
            for &(p, t) in ms {
                let lse = (0..6).map(|j| z[(p, j)].exp()).sum::<f64>().ln();
                naive += lse - z[(p, t)];
            }
        }
        assert!((v - naive / 3.0).abs() < 1e-10);
        let refs: Vec<&Matrix> = zs.iter().collect();
        let f = |x: &[f64]| mlm_loss(&unflatten(x, &refs), &masks).unwrap().0;
        let r = grad_check(f, &flatten(&refs), &flatten(&g.iter().collect::<Vec<_>>()), GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(mlm_loss(&zs, &[vec![], vec![]]).is_err());
    }
}

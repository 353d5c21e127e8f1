//! Skew-symmetric generators, the exponential map onto SO(n), rotation-angle
//! extraction, and numerical checks of the angle-scaling and
//! perpendicular-planes properties.
//!
//! The generator symbols are `C` and `C'` here. The literature this follows
//! reuses `A` for a skew generator, which collides with the LoRA `A` factor.

use nalgebra::{DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{RcuError, Result};
use crate::matrix::{ensure_same_shape, ensure_square, frobenius_sq, Matrix};

/// Default tolerance for Lie-group checks.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative tolerance on `||C + C^T||_F` for inputs that must be skew.
pub const SKEW_TOL: f64 = 1e-10;

const MAX_SQUARINGS: u32 = 64;
const MAX_TERMS: usize = 64;

/// `||M + M^T||_F^2`.
pub fn skew_residual(m: &Matrix) -> Result<f64> {
    ensure_square(m, "skew_residual")?;
    Ok(frobenius_sq(&(m + m.transpose())))
}

/// Fails unless `m` is square, finite and skew within [`SKEW_TOL`].
pub fn ensure_skew(m: &Matrix, op: &'static str) -> Result<usize> {
    let n = ensure_square(m, op)?;
    let err = (m + m.transpose()).norm();
    if err > SKEW_TOL * m.norm().max(1.0) {
        return Err(RcuError::pre(op, format!("input is not skew-symmetric (||M + M^T||_F = {err:.3e})")));
    }
    Ok(n)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The generator is scaled by `2^-s` until its 1-norm is at most 1/2, terms
/// are added until a term's Frobenius norm drops below `tol * 2^-s` (or below
/// what double precision can still resolve), and the result is squared `s`
/// times.
pub fn mat_exp(c: &Matrix, tol: f64) -> Result<Matrix> {
    let n = ensure_square(c, "mat_exp")?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(RcuError::domain("mat_exp", format!("tol must be positive and finite, got {tol}")));
    }
    let norm1 = (0..n).map(|j| c.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0u32;
    while norm1 / 2f64.powi(s as i32) > 0.5 {
        s += 1;
        if s > MAX_SQUARINGS {
            return Err(RcuError::Convergence {
                op: "mat_exp",
                detail: format!("generator norm {norm1:.3e} exceeds the scaling budget"),
            });
        }
    }
    let scale = 2f64.powi(-(s as i32));
    let a = c * scale;
    let threshold = tol * scale;

    let mut sum = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    let mut converged = false;
    for k in 1..=MAX_TERMS {
        term = (&term * &a) / k as f64;
        sum += &term;
        let tn = term.norm();
        if tn < threshold || tn <= f64::EPSILON * 1e-3 * sum.norm() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RcuError::Convergence {
            op: "mat_exp",
            detail: format!("series did not reach tol {tol:e} within {MAX_TERMS} terms"),
        });
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// `||exp(C) - (I + C)||_F` for a skew generator.
pub fn small_angle_error(c: &Matrix) -> Result<f64> {
    let n = ensure_skew(c, "small_angle_error")?;
    let r = mat_exp(c, 1e-16)?;
    Ok((r - Matrix::identity(n, n) - c).norm())
}

/// Angles and planes of the rotation generated by a skew matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpectrum {
    /// Positive rotation angles in radians, descending.
    pub angles: Vec<f64>,
    /// One orthonormal pair `(u, v)` per angle, with `C u = -theta v`.
    pub planes: Vec<(DVector<f64>, DVector<f64>)>,
    pub fixed_space_dim: usize,
}

impl RotationSpectrum {
    pub fn dim(&self) -> usize {
        2 * self.angles.len() + self.fixed_space_dim
    }

    /// Angles padded with zeros to `floor(n / 2)` entries, descending.
    pub fn padded_angles(&self) -> Vec<f64> {
        let mut out = self.angles.clone();
        out.resize(self.dim() / 2, 0.0);
        out
    }

    /// `sum_j theta_j (u_j v_j^T - v_j u_j^T)`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut c = Matrix::zeros(n, n);
        for (theta, (u, v)) in self.angles.iter().zip(&self.planes) {
            c += (u * v.transpose() - v * u.transpose()) * *theta;
        }
        c
    }

    /// All plane basis vectors, two per plane.
    pub fn basis(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.planes.iter().flat_map(|(u, v)| [u, v])
    }
}

/// Rotation angles of `exp(C)` read off the singular values of `C`.
///
/// Singular values of a skew matrix come in equal pairs; each pair is one
/// angle. Plane bases are built from the right singular vectors by
/// Gram-Schmidt, which stays well defined when angles repeat.
pub fn rotation_spectrum(c: &Matrix) -> Result<RotationSpectrum> {
    let n = ensure_skew(c, "rotation_spectrum")?;
    if n < 2 {
        return Err(RcuError::pre("rotation_spectrum", "dimension must be at least 2"));
    }
    let svd = c.clone().try_svd(false, true, f64::EPSILON, 0).ok_or_else(|| RcuError::Convergence {
        op: "rotation_spectrum",
        detail: "SVD did not converge".into(),
    })?;
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let sigma_max = sigma[order[0]];
    let zero_tol = 1e-11 * sigma_max;

    let mut angles = Vec::new();
    for pair in order.chunks_exact(2) {
        let theta = 0.5 * (sigma[pair[0]] + sigma[pair[1]]);
        if theta > zero_tol && theta > 0.0 {
            angles.push(theta);
        }
    }
    if let Some(&theta) = angles.iter().find(|&&t| t >= std::f64::consts::PI) {
        return Err(RcuError::Branch { angle: theta, context: String::new() });
    }

    let candidates: Vec<DVector<f64>> =
        order[..2 * angles.len()].iter().map(|&i| v_t.row(i).transpose()).collect();
    let mut used = vec![false; candidates.len()];
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(2 * angles.len());
    let mut planes = Vec::with_capacity(angles.len());
    while planes.len() < angles.len() {
        let (best, resid) = candidates
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, x)| (i, orthogonalize(x.clone(), &basis)))
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .expect("fewer planes than candidate vectors");
        used[best] = true;
        let rn = resid.norm();
        if rn < 1e-6 {
            return Err(RcuError::Numeric { op: "rotation_spectrum", detail: "plane basis collapsed".into() });
        }
        let u = resid / rn;
        let w = -(c * &u);
        let plane_angle = w.norm();
        let mut w = orthogonalize(w, &basis);
        w -= &u * u.dot(&w);
        let wn = w.norm();
        if wn < 1e-6 * plane_angle.max(f64::MIN_POSITIVE) {
            return Err(RcuError::Numeric { op: "rotation_spectrum", detail: "degenerate plane partner".into() });
        }
        let v = w / wn;
        basis.push(u.clone());
        basis.push(v.clone());
        planes.push((plane_angle, u, v));
    }
    planes.sort_by(|a, b| b.0.total_cmp(&a.0));

    Ok(RotationSpectrum {
        fixed_space_dim: n - 2 * angles.len(),
        angles,
        planes: planes.into_iter().map(|(_, u, v)| (u, v)).collect(),
    })
}

fn orthogonalize(mut x: DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let d = b.dot(&x);
            x -= b * d;
        }
    }
    x
}

/// Eigenvalue phases of an orthogonal matrix, `floor(n / 2)` of them, descending.
///
/// Each eigenvector `u` of the symmetric part gives `cos(theta)` as its
/// eigenvalue and `sin(theta)` as `||K u||` with `K` the skew part, so the
/// phase is recovered with `atan2` at full precision for small angles.
pub fn rotation_phases(r: &Matrix) -> Result<Vec<f64>> {
    let n = ensure_square(r, "rotation_phases")?;
    let rt = r.transpose();
    let sym = (r + &rt) * 0.5;
    let skew = (r - &rt) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0).ok_or_else(|| RcuError::Convergence {
        op: "rotation_phases",
        detail: "symmetric eigensolver did not converge".into(),
    })?;
    let mut phases: Vec<f64> = (0..n)
        .map(|i| {
            let u = eig.eigenvectors.column(i);
            let sin = (&skew * u).norm();
            sin.atan2(eig.eigenvalues[i])
        })
        .collect();
    phases.sort_by(|a, b| b.total_cmp(a));
    Ok(phases.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect())
}

/// Angle comparison for one scaling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCheck {
    pub k: f64,
    pub expected: Vec<f64>,
    /// Angles of `k C` from [`rotation_spectrum`].
    pub from_generator: Vec<f64>,
    /// Eigenvalue phases of `mat_exp(k C)`.
    pub from_exponential: Vec<f64>,
    pub max_abs_error: f64,
}

/// Outcome of [`verify_theorem1`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub base_angles: Vec<f64>,
    pub checks: Vec<ScalingCheck>,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Checks that the rotation angles of `exp(kC)` are `k` times those of `exp(C)`.
pub fn verify_theorem1(c: &Matrix, k_values: &[f64], tol: f64) -> Result<ScalingReport> {
    let base = rotation_spectrum(c)?;
    let base_angles = base.padded_angles();
    let theta_max = base_angles.first().copied().unwrap_or(0.0);
    let mut checks = Vec::with_capacity(k_values.len());
    for &k in k_values {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(RcuError::domain("verify_theorem1", format!("scale factor must be finite and >= 0, got {k}")));
        }
        if k * theta_max >= std::f64::consts::PI {
            return Err(RcuError::Branch { angle: k * theta_max, context: format!(" for k = {k}") });
        }
        let kc = c * k;
        let expected: Vec<f64> = base_angles.iter().map(|t| k * t).collect();
        let from_generator = rotation_spectrum(&kc)?.padded_angles();
        let from_exponential = rotation_phases(&mat_exp(&kc, tol * 1e-3)?)?;
        let max_abs_error = expected
            .iter()
            .zip(&from_generator)
            .zip(&from_exponential)
            .map(|((e, g), x)| (e - g).abs().max((e - x).abs()))
            .fold(0.0, f64::max);
        checks.push(ScalingCheck { k, expected, from_generator, from_exponential, max_abs_error });
    }
    let max_abs_error = checks.iter().map(|c| c.max_abs_error).fold(0.0, f64::max);
    Ok(ScalingReport { base_angles, passed: max_abs_error <= tol, max_abs_error, checks })
}

/// Outcome of [`verify_theorem2`].
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityReport {
    /// `||C C'||_F`
    pub product_norm: f64,
    /// `||C' C||_F`
    pub reverse_product_norm: f64,
    /// Largest `|<a, b>|` over plane basis vectors `a` of `C` and `b` of `C'`.
    pub max_cross_dot: f64,
    /// `||exp(C) exp(C') - exp(C + C')||_F`, computed only when the
    /// generators annihilate each other.
    pub commute_error: Option<f64>,
    pub passed: bool,
}

/// Checks that two generators rotate in mutually perpendicular planes.
///
/// The literal check is generator annihilation (`C C' = C' C = 0`) plus
/// orthogonality of every pair of plane basis vectors; when both hold the
/// two rotations commute, which is checked against the exponential of the sum.
pub fn verify_theorem2(c: &Matrix, cp: &Matrix, tol: f64) -> Result<OrthogonalityReport> {
    ensure_skew(c, "verify_theorem2")?;
    ensure_skew(cp, "verify_theorem2")?;
    ensure_same_shape(c, cp, "verify_theorem2")?;
    let product_norm = (c * cp).norm();
    let reverse_product_norm = (cp * c).norm();
    let sa = rotation_spectrum(c)?;
    let sb = rotation_spectrum(cp)?;
    let max_cross_dot = sa
        .basis()
        .flat_map(|a| sb.basis().map(move |b| a.dot(b).abs()))
        .fold(0.0, f64::max);

    let products_ok = product_norm <= tol && reverse_product_norm <= tol && max_cross_dot <= tol;
    let commute_error = if products_ok {
        let lhs = mat_exp(c, tol * 1e-3)? * mat_exp(cp, tol * 1e-3)?;
        Some((lhs - mat_exp(&(c + cp), tol * 1e-3)?).norm())
    } else {
        None
    };
    let passed = products_ok && commute_error.is_some_and(|e| e <= 10.0 * tol);
    Ok(OrthogonalityReport { product_norm, reverse_product_norm, max_cross_dot, commute_error, passed })
}

/// Generators and random matrices used by tests, benches and the verify suite.
pub mod gen {
    use super::*;

    /// `B(theta)` embedded on coordinates `(i, j)`: `C[i][j] = -theta`, `C[j][i] = theta`.
    pub fn plane_generator(n: usize, i: usize, j: usize, theta: f64) -> Matrix {
        let mut c = Matrix::zeros(n, n);
        c[(i, j)] = -theta;
        c[(j, i)] = theta;
        c
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Random skew matrix with the given Frobenius norm.
    pub fn random_skew<R: Rng + ?Sized>(n: usize, frobenius: f64, rng: &mut R) -> Matrix {
        let g = gaussian(n, n, 1.0, rng);
        let s = &g - g.transpose();
        let norm = s.norm();
        if norm == 0.0 {
            s
        } else {
            s * (frobenius / norm)
        }
    }

    /// Haar-ish random orthogonal matrix from the QR factorization of a Gaussian.
    pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
        let qr = gaussian(n, n, 1.0, rng).qr();
        let (q, r) = (qr.q(), qr.r());
        let mut q = q;
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        q
    }

    /// `Q diag(B(theta_1), ..., B(theta_m), 0...) Q^T` in dimension `n`.
    pub fn skew_from_angles(n: usize, angles: &[f64], q: &Matrix) -> Matrix {
        assert!(2 * angles.len() <= n, "too many angles for dimension");
        let mut d = Matrix::zeros(n, n);
        for (j, &t) in angles.iter().enumerate() {
            d[(2 * j, 2 * j + 1)] = -t;
            d[(2 * j + 1, 2 * j)] = t;
        }
        q * d * q.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::gen::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn skew_residual_examples() {
        let j = Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert_eq!(skew_residual(&j).unwrap(), 0.0);
        assert_eq!(skew_residual(&Matrix::identity(2, 2)).unwrap(), 8.0);
        assert_eq!(skew_residual(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        assert!(matches!(skew_residual(&Matrix::zeros(2, 3)), Err(RcuError::Shape { .. })));
        let mut bad = Matrix::zeros(2, 2);
        bad[(1, 0)] = f64::INFINITY;
        assert!(skew_residual(&bad).is_err());
    }

    #[test]
    fn exp_of_zero_is_identity() {
        for n in [2, 5, 9] {
            assert_eq!(mat_exp(&Matrix::zeros(n, n), 1e-10).unwrap(), Matrix::identity(n, n));
        }
    }

    #[test]
    fn exp_of_planar_generator_is_closed_form_rotation() {
        let theta: f64 = 0.3;
        let r = mat_exp(&plane_generator(2, 0, 1, theta), 1e-12).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        assert!((r - expected).norm() < 1e-13);
    }

    #[test]
    fn exp_of_large_generator_uses_squaring() {
        // angle 2.5 rad needs several squarings
        let theta: f64 = 2.5;
        let r = mat_exp(&plane_generator(3, 0, 2, theta), 1e-12).unwrap();
        assert!((r[(0, 0)] - theta.cos()).abs() < 1e-12);
        assert!((r[(2, 0)] - theta.sin()).abs() < 1e-12);
        assert!((r[(1, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exp_of_small_random_skew_is_orthogonal() {
        let c = random_skew(8, 0.05, &mut rng(1));
        let r = mat_exp(&c, 1e-10).unwrap();
        assert!((r.transpose() * &r - Matrix::identity(8, 8)).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_budget_and_tol_errors() {
        assert!(matches!(
            mat_exp(&plane_generator(2, 0, 1, 1e300), 1e-10),
            Err(RcuError::Convergence { .. })
        ));
        assert!(matches!(mat_exp(&Matrix::zeros(2, 2), 0.0), Err(RcuError::Domain { .. })));
    }

    #[test]
    fn small_angle_error_examples() {
        assert_eq!(small_angle_error(&Matrix::zeros(3, 3)).unwrap(), 0.0);

        // closed form: exp - I - C has entries cos-1 on the diagonal and
        // -(sin t - t), (sin t - t) off it
        let t: f64 = 1e-3;
        let c = plane_generator(2, 0, 1, t);
        let oracle = (2.0 * (t.cos() - 1.0).powi(2) + 2.0 * (t.sin() - t).powi(2)).sqrt();
        let got = small_angle_error(&c).unwrap();
        assert!((got - oracle).abs() < 1e-15, "{got} vs {oracle}");
        assert!((got - 7.0710678e-7).abs() < 1e-12);
        let f = c.norm();
        assert!(got <= 0.5 * f * f * f.exp());

        let c = random_skew(16, 0.1, &mut rng(2));
        assert!(small_angle_error(&c).unwrap() <= 0.5 * 0.01 * 0.1f64.exp());
        assert!(matches!(small_angle_error(&Matrix::identity(2, 2)), Err(RcuError::Precondition { .. })));
    }

    #[test]
    fn spectrum_of_single_block() {
        let s = rotation_spectrum(&plane_generator(2, 0, 1, 0.3)).unwrap();
        assert_eq!(s.angles.len(), 1);
        assert!((s.angles[0] - 0.3).abs() < 1e-15);
        assert_eq!(s.fixed_space_dim, 0);
    }

    #[test]
    fn spectrum_of_block_diagonal_with_fixed_axis() {
        let c = plane_generator(5, 0, 1, 0.2) + plane_generator(5, 2, 3, 0.05);
        let s = rotation_spectrum(&c).unwrap();
        assert_eq!(s.angles.len(), 2);
        assert!((s.angles[0] - 0.2).abs() < 1e-14);
        assert!((s.angles[1] - 0.05).abs() < 1e-14);
        assert_eq!(s.fixed_space_dim, 1);
        assert!((s.reconstruct() - &c).norm() <= 1e-8 * c.norm());
    }

    #[test]
    fn spectrum_of_zero() {
        let s = rotation_spectrum(&Matrix::zeros(4, 4)).unwrap();
        assert!(s.angles.is_empty());
        assert_eq!(s.fixed_space_dim, 4);
        assert_eq!(s.padded_angles(), vec![0.0, 0.0]);
    }

    #[test]
    fn spectrum_errors() {
        assert!(matches!(rotation_spectrum(&Matrix::identity(3, 3)), Err(RcuError::Precondition { .. })));
        assert!(matches!(rotation_spectrum(&plane_generator(3, 0, 1, 3.5)), Err(RcuError::Branch { .. })));
    }

    #[test]
    fn spectrum_handles_repeated_angles() {
        let q = random_orthogonal(6, &mut rng(3));
        let c = skew_from_angles(6, &[0.1, 0.1, 0.1], &q);
        let s = rotation_spectrum(&c).unwrap();
        assert_eq!(s.angles.len(), 3);
        for a in &s.angles {
            assert!((a - 0.1).abs() < 1e-13);
        }
        assert!((s.reconstruct() - &c).norm() <= 1e-8 * c.norm());
        let b: Vec<_> = s.basis().collect();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let d = b[i].dot(b[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn phases_match_closed_form() {
        let q = random_orthogonal(7, &mut rng(4));
        let c = skew_from_angles(7, &[0.4, 0.25, 1e-4], &q);
        let phases = rotation_phases(&mat_exp(&c, 1e-14).unwrap()).unwrap();
        assert_eq!(phases.len(), 3);
        for (p, e) in phases.iter().zip([0.4, 0.25, 1e-4]) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
    }

    #[test]
    fn theorem1_examples() {
        let q = random_orthogonal(6, &mut rng(5));
        let c = skew_from_angles(6, &[0.1, 0.04], &q);
        let rep = verify_theorem1(&c, &[2.0], 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!((rep.checks[0].from_exponential[0] - 0.2).abs() < 1e-10);
        assert!((rep.checks[0].from_exponential[1] - 0.08).abs() < 1e-10);

        let rep = verify_theorem1(&random_skew(5, 0.3, &mut rng(6)), &[0.0], 1e-10).unwrap();
        assert!(rep.passed);
        assert!(rep.checks[0].from_generator.iter().all(|&a| a == 0.0));

        let rep = verify_theorem1(&plane_generator(4, 1, 3, 0.3), &[1.0], 1e-10).unwrap();
        assert!(rep.passed);
        assert!((rep.checks[0].from_generator[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn theorem1_names_offending_scale() {
        let err = verify_theorem1(&plane_generator(4, 0, 1, 1.0), &[1.0, 4.0], 1e-10).unwrap_err();
        assert!(err.to_string().contains("k = 4"), "{err}");
    }

    #[test]
    fn theorem2_examples() {
        let c = plane_generator(4, 0, 1, 0.2);
        let cp = plane_generator(4, 2, 3, 0.1);
        let rep = verify_theorem2(&c, &cp, 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.product_norm, 0.0);
        assert_eq!(rep.reverse_product_norm, 0.0);

        let rep = verify_theorem2(&c, &c, 1e-10).unwrap();
        assert!(!rep.passed);
        assert!(rep.product_norm > 0.0);
        assert!(rep.commute_error.is_none());
    }

    #[test]
    fn theorem2_random_plane_and_complement() {
        // oracle: complement basis from an orthonormalized random frame
        let q = random_orthogonal(6, &mut rng(7));
        let (u, v) = (q.column(0).into_owned(), q.column(1).into_owned());
        let c = (&u * v.transpose() - &v * u.transpose()) * 0.17;
        let mut cp = Matrix::zeros(6, 6);
        for (a, b, t) in [(2, 3, 0.09), (4, 5, 0.05)] {
            let (x, y) = (q.column(a), q.column(b));
            cp += (x * y.transpose() - y * x.transpose()) * t;
        }
        let rep = verify_theorem2(&c, &cp, 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}

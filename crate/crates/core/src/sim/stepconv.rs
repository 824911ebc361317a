//! Conversions of influence matrices and trend parameters between
//! discretization steps.
//!
//! With a fine step `delta` and a coarse step `delta_star = rho * delta`, the
//! coarse transition over one interval equals the product of the `rho` fine
//! transitions: `I + delta_star A* = prod_l (I + delta A(t + l delta))`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

type CMatrix = DMatrix<Complex<f64>>;

fn check(rho: usize, delta_star: f64) -> Result<()> {
    if rho == 0 {
        return Err(Error::InvalidParameter("rho must be at least 1".into()));
    }
    if !(delta_star.is_finite() && delta_star > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {delta_star}")));
    }
    Ok(())
}

fn square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidParameter(format!("matrix is {}x{}, not square", a.nrows(), a.ncols())));
    }
    Ok(())
}

/// `m^p` by repeated squaring.
pub fn matrix_power(m: &DMatrix<f64>, mut p: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    while p > 0 {
        if p & 1 == 1 {
            result = &result * &base;
        }
        p >>= 1;
        if p > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Coarse influence over one interval from the `rho` fine influences
/// `A(t), A(t + delta), ...` in time order.
pub fn fine_to_coarse(a_fine: &[DMatrix<f64>], delta: f64) -> Result<DMatrix<f64>> {
    check(a_fine.len(), delta)?;
    let n = a_fine[0].nrows();
    let mut prod = DMatrix::identity(n, n);
    for a in a_fine {
        square(a)?;
        // latest transition leftmost
        prod = (DMatrix::identity(n, n) + a * delta) * prod;
    }
    let delta_star = delta * a_fine.len() as f64;
    Ok((prod - DMatrix::identity(n, n)) / delta_star)
}

/// Constant-influence form: `((I + (delta_star/rho) A)^rho - I) / delta_star`.
pub fn fine_to_coarse_const(a: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DMatrix<f64>> {
    check(rho, delta_star)?;
    square(a)?;
    let n = a.nrows();
    let step = DMatrix::identity(n, n) + a * (delta_star / rho as f64);
    Ok((matrix_power(&step, rho) - DMatrix::identity(n, n)) / delta_star)
}

/// Inverse of [`fine_to_coarse_const`]:
/// `(rho / delta_star) ((I + delta_star A*)^{1/rho} - I)` with the principal root.
pub fn coarse_to_fine(a_coarse: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DMatrix<f64>> {
    check(rho, delta_star)?;
    square(a_coarse)?;
    let n = a_coarse.nrows();
    if rho == 1 {
        return Ok(a_coarse.clone());
    }
    let m = DMatrix::identity(n, n) + a_coarse * delta_star;
    let root = principal_root(&m, rho)?;
    Ok((root - DMatrix::identity(n, n)) * (rho as f64 / delta_star))
}

/// Coarse influence of a continuous-time system: `(exp(delta_star A) - I) / delta_star`.
pub fn influence_from_continuous(a: &DMatrix<f64>, delta_star: f64) -> Result<DMatrix<f64>> {
    check(1, delta_star)?;
    square(a)?;
    let n = a.nrows();
    Ok(((a * delta_star).exp() - DMatrix::identity(n, n)) / delta_star)
}

/// `sum_{s=1}^{rho} (I + delta A)^{rho - s}` for constant fine influence `A`
/// and fine step `delta = delta_star / rho`.
pub fn psi_sum(a_fine: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DMatrix<f64>> {
    check(rho, delta_star)?;
    square(a_fine)?;
    let n = a_fine.nrows();
    let step = DMatrix::identity(n, n) + a_fine * (delta_star / rho as f64);
    let mut power = DMatrix::identity(n, n);
    let mut sum = DMatrix::zeros(n, n);
    for _ in 0..rho {
        sum += &power;
        power = &step * power;
    }
    Ok(sum)
}

/// Coarse trend intercepts from fine ones: `gamma* = (1/rho) (sum Psi) gamma`.
/// The same map applies to the random trend intercepts.
pub fn trend_to_coarse(gamma: &DVector<f64>, a_fine: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DVector<f64>> {
    Ok(psi_sum(a_fine, delta_star, rho)? * gamma / rho as f64)
}

/// Matrix `rho (sum Psi)^{-1}` mapping coarse trend intercepts to fine ones.
pub fn trend_inverse_operator(a_fine: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DMatrix<f64>> {
    let s = psi_sum(a_fine, delta_star, rho)?;
    let inv = s.try_inverse().ok_or_else(|| Error::numerical("sum of transition products is singular"))?;
    Ok(inv * rho as f64)
}

pub fn trend_to_fine(gamma_star: &DVector<f64>, a_fine: &DMatrix<f64>, delta_star: f64, rho: usize) -> Result<DVector<f64>> {
    Ok(trend_inverse_operator(a_fine, delta_star, rho)? * gamma_star)
}

/// Principal square root of an upper-triangular matrix (column recurrence).
fn sqrt_upper(t: &CMatrix) -> CMatrix {
    let n = t.nrows();
    let mut r = CMatrix::zeros(n, n);
    for j in 0..n {
        r[(j, j)] = t[(j, j)].sqrt();
        for i in (0..j).rev() {
            let mut s = t[(i, j)];
            for k in i + 1..j {
                s -= r[(i, k)] * r[(k, j)];
            }
            r[(i, j)] = s / (r[(i, i)] + r[(j, j)]);
        }
    }
    r
}

/// Principal logarithm of an upper-triangular matrix close to the identity,
/// `log X = 2 atanh((X - I)(X + I)^{-1})` summed as a series.
fn log_near_identity(x: &CMatrix) -> Result<CMatrix> {
    let n = x.nrows();
    let id = CMatrix::identity(n, n);
    let denom = (x + &id).try_inverse().ok_or_else(|| Error::numerical("singular matrix in logarithm"))?;
    let y = (x - &id) * denom;
    let y2 = &y * &y;
    let mut term = y.clone();
    let mut sum = y;
    for m in 1..200 {
        term = &term * &y2;
        let add = &term / Complex::new((2 * m + 1) as f64, 0.0);
        sum += &add;
        if add.norm() < 1e-18 * sum.norm().max(1e-300) {
            break;
        }
    }
    Ok(sum * Complex::new(2.0, 0.0))
}

/// Principal `p`-th root of a real matrix whose eigenvalues avoid the closed
/// negative real axis, through the complex Schur form: repeated square roots
/// bring the triangular factor near the identity, its logarithm is divided by
/// `p` and exponentiated.
pub fn principal_root(m: &DMatrix<f64>, p: usize) -> Result<DMatrix<f64>> {
    square(m)?;
    if p == 0 {
        return Err(Error::InvalidParameter("root order must be at least 1".into()));
    }
    if p == 1 {
        return Ok(m.clone());
    }
    let n = m.nrows();
    let scale = m.norm().max(1.0);
    let mc: CMatrix = m.map(|v| Complex::new(v, 0.0));
    let (q, t) = mc.schur().unpack();
    let eig: Vec<Complex<f64>> = (0..n).map(|i| t[(i, i)]).collect();
    let bad: Vec<String> = eig
        .iter()
        .filter(|z| z.im.abs() <= 1e-12 * scale && z.re <= 0.0)
        .map(|z| format!("{:.6}{:+.6}i", z.re, z.im))
        .collect();
    if !bad.is_empty() {
        return Err(Error::numerical(format!(
            "no real principal root: eigenvalues on the closed negative real axis: {}",
            bad.join(", ")
        )));
    }
    let id = CMatrix::identity(n, n);
    let mut r = t;
    let mut k = 0;
    while (&r - &id).norm() > 0.25 {
        if k == 64 {
            return Err(Error::numerical("matrix root did not converge"));
        }
        r = sqrt_upper(&r);
        k += 1;
    }
    let log = log_near_identity(&r)?;
    let factor = 2f64.powi(k) / p as f64;
    let root_t = (log * Complex::new(factor, 0.0)).exp();
    let root = &q * root_t * q.adjoint();
    let imag = root.map(|z| z.im).norm();
    if imag > 1e-8 * root.norm().max(1.0) {
        return Err(Error::numerical(format!("matrix root has a non-negligible imaginary part ({imag:.2e})")));
    }
    Ok(root.map(|z| z.re))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_examples() {
        let c = fine_to_coarse_const(&scalar(-0.2), 1.0, 2).unwrap();
        assert!((c[(0, 0)] + 0.19).abs() < 1e-12);
        let f = coarse_to_fine(&scalar(-0.19), 1.0, 2).unwrap();
        assert!((f[(0, 0)] + 0.2).abs() < 1e-12);
        let e = influence_from_continuous(&scalar(-0.1), 1.0).unwrap();
        assert!((e[(0, 0)] - ((-0.1f64).exp() - 1.0)).abs() < 1e-12);
        assert!((e[(0, 0)] + 0.09516).abs() < 1e-5);
    }

    #[test]
    fn identities_at_rho_one_and_zero_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.1, 0.3, 0.05, -0.2]);
        assert!((fine_to_coarse_const(&a, 1.0, 1).unwrap() - &a).amax() < 1e-15);
        assert_eq!(coarse_to_fine(&a, 1.0, 1).unwrap(), a);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(fine_to_coarse_const(&z, 0.7, 9).unwrap(), z);
        assert_eq!(influence_from_continuous(&z, 1.0).unwrap(), z);
        assert!(coarse_to_fine(&z, 1.0, 5).unwrap().norm() < 1e-14);
    }

    #[test]
    fn ordered_product_matches_constant_form() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.1, 0.3, 0.05, -0.2]);
        let general = fine_to_coarse(&vec![a.clone(); 4], 0.25).unwrap();
        let constant = fine_to_coarse_const(&a, 1.0, 4).unwrap();
        assert!((general - constant).norm() < 1e-14);
    }

    #[test]
    fn exponential_limit_is_monotone() {
        let a = DMatrix::from_row_slice(3, 3, &[-0.3, 0.2, 0.0, 0.1, -0.5, 0.4, -0.2, 0.0, -0.1]);
        let target = influence_from_continuous(&a, 1.0).unwrap();
        let errs: Vec<f64> = [10, 100, 1000]
            .iter()
            .map(|&rho| (fine_to_coarse_const(&a, 1.0, rho).unwrap() - &target).norm())
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn negative_real_eigenvalue_has_no_root() {
        // I + A = diag(-0.5, 1)
        let a = DMatrix::from_row_slice(2, 2, &[-1.5, 0.0, 0.0, 0.0]);
        let err = coarse_to_fine(&a, 1.0, 2).unwrap_err();
        assert!(err.to_string().contains("negative real axis"));
    }

    #[test]
    fn rotation_root() {
        // complex eigenvalues: a rotation by 0.8 rad has a real principal square root
        let (c, s) = (0.8f64.cos(), 0.8f64.sin());
        let m = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let r = principal_root(&m, 2).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.4f64.cos(), -0.4f64.sin(), 0.4f64.sin(), 0.4f64.cos()]);
        assert!((r - expect).norm() < 1e-12);
    }

    #[test]
    fn trend_scalar_geometric_series() {
        let (a, rho, g) = (-0.3, 5usize, 0.7);
        let delta = 1.0 / rho as f64;
        let got = trend_to_coarse(&DVector::from_element(1, g), &scalar(a), 1.0, rho).unwrap()[0];
        let expect = g / rho as f64 * (1..=rho).map(|s| (1.0 + delta * a).powi((rho - s) as i32)).sum::<f64>();
        assert!((got - expect).abs() < 1e-14);
        let zero = trend_to_coarse(&DVector::from_element(2, 0.4), &DMatrix::zeros(2, 2), 1.0, 7).unwrap();
        assert!((zero[0] - 0.4).abs() < 1e-15);
    }

    /// Gershgorin discs put the eigenvalues of `A` within 0.45 of -0.5: stable
    /// in continuous time, and `I + A` contracts with positive real spectrum.
    pub(crate) fn stable(entries: &[f64], n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(n, n, &entries[..n * n]);
        m * 0.15 - DMatrix::identity(n, n) * 0.5
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trips(entries in proptest::collection::vec(-1.0f64..1.0, 9), n in 1usize..4, rho in 2usize..12) {
            let a = stable(&entries, n);
            let fine = coarse_to_fine(&a, 1.0, rho).unwrap();
            let back = fine_to_coarse_const(&fine, 1.0, rho).unwrap();
            prop_assert!((&back - &a).amax() < 1e-10, "coarse->fine->coarse {}", (&back - &a).amax());
            let coarse = fine_to_coarse_const(&a, 1.0, rho).unwrap();
            let again = coarse_to_fine(&coarse, 1.0, rho).unwrap();
            prop_assert!((&again - &a).amax() < 1e-10, "fine->coarse->fine {}", (&again - &a).amax());
            let g = DVector::from_iterator(n, entries.iter().take(n).copied());
            let gs = trend_to_coarse(&g, &a, 1.0, rho).unwrap();
            let g2 = trend_to_fine(&gs, &a, 1.0, rho).unwrap();
            prop_assert!((g2 - g).amax() < 1e-10);
        }
    }
}

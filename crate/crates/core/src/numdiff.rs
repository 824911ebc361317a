//! Central finite differences for gradients and Hessians of expensive scalar
//! functions. Probe points are evaluated in parallel.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative step: `h_i = REL_STEP * max(1, |x_i|)`.
pub const REL_STEP: f64 = 1e-4;
/// A non-finite probe shrinks its steps by 10, at most this many times.
const MAX_SHRINK: usize = 3;

pub fn step_sizes(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| REL_STEP * v.abs().max(1.0)).collect()
}

fn shifted(x: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut p = x.to_vec();
    for &(i, h) in moves {
        p[i] += h;
    }
    p
}

/// Evaluate `stencil(scale)` until every returned value is finite, shrinking
/// the scale between attempts.
fn with_shrink<T>(what: impl Fn() -> String, mut stencil: impl FnMut(f64) -> Option<T>) -> Result<T> {
    let mut scale = 1.0;
    for _ in 0..=MAX_SHRINK {
        if let Some(v) = stencil(scale) {
            return Ok(v);
        }
        scale *= 0.1;
    }
    Err(Error::numerical(format!("objective not finite near {}", what())))
}

fn central<F>(f: &F, x: &[f64], i: usize, h: f64, f0: Option<f64>) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    with_shrink(
        || format!("coordinate {i}"),
        |s| {
            let hi = h * s;
            let fp = f(&shifted(x, &[(i, hi)]));
            let fm = f(&shifted(x, &[(i, -hi)]));
            (fp.is_finite() && fm.is_finite()).then(|| {
                let curv = f0.map(|c| (fp - 2.0 * c + fm) / (hi * hi)).unwrap_or(f64::NAN);
                ((fp - fm) / (2.0 * hi), curv)
            })
        },
    )
}

/// Central-difference gradient.
pub fn gradient<F>(f: &F, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let h = step_sizes(x);
    let parts: Vec<Result<(f64, f64)>> = (0..x.len()).into_par_iter().map(|i| central(f, x, i, h[i], None)).collect();
    parts.into_iter().map(|r| r.map(|p| p.0)).collect()
}

/// Gradient and symmetric Hessian from one set of probes; `f0 = f(x)`.
///
/// Diagonal terms use the three-point formula, off-diagonal terms the
/// four-point `(f(++) - f(+-) - f(-+) + f(--)) / (4 h_i h_j)`.
pub fn gradient_hessian<F>(f: &F, x: &[f64], f0: f64) -> Result<(Vec<f64>, DMatrix<f64>)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !f0.is_finite() {
        return Err(Error::numerical("objective not finite at the expansion point"));
    }
    let n = x.len();
    let h = step_sizes(x);
    let diag: Vec<Result<(f64, f64)>> = (0..n).into_par_iter().map(|i| central(f, x, i, h[i], Some(f0))).collect();
    let mut grad = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    for (i, r) in diag.into_iter().enumerate() {
        let (g, c) = r?;
        grad[i] = g;
        hess[(i, i)] = c;
    }

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let off: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            with_shrink(
                || format!("coordinates ({i}, {j})"),
                |s| {
                    let (hi, hj) = (h[i] * s, h[j] * s);
                    let pp = f(&shifted(x, &[(i, hi), (j, hj)]));
                    let pm = f(&shifted(x, &[(i, hi), (j, -hj)]));
                    let mp = f(&shifted(x, &[(i, -hi), (j, hj)]));
                    let mm = f(&shifted(x, &[(i, -hi), (j, -hj)]));
                    [pp, pm, mp, mm]
                        .iter()
                        .all(|v| v.is_finite())
                        .then(|| (pp - pm - mp + mm) / (4.0 * hi * hj))
                },
            )
        })
        .collect();
    for (&(i, j), r) in pairs.iter().zip(off) {
        let v = r?;
        hess[(i, j)] = v;
        hess[(j, i)] = v;
    }
    Ok((grad, hess))
}

/// Symmetric finite-difference Hessian.
pub fn hessian<F>(f: &F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    Ok(gradient_hessian(f, x, f(x))?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, -0.3, 0.1, -0.3, 4.0]);
        let b = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let f = |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            (v.transpose() * &q * &v)[(0, 0)] + b.dot(&v)
        };
        let x = [0.3, -1.7, 12.0];
        let exact = (&q + q.transpose()) * DVector::from_column_slice(&x) + &b;
        let g = gradient(&f, &x).unwrap();
        for i in 0..3 {
            assert!((g[i] - exact[i]).abs() < 1e-6, "{i}: {} vs {}", g[i], exact[i]);
        }
        let (g2, h) = gradient_hessian(&f, &x, f(&x)).unwrap();
        assert_eq!(g, g2);
        assert!((h - (&q + q.transpose())).abs().max() < 1e-4);
    }

    #[test]
    fn non_finite_probe_shrinks_then_errors() {
        // the full step from 5e-5 crosses the barrier at 0, a shrunk one does not
        let f = |x: &[f64]| if x[0] > 0.0 { x[0].ln() } else { f64::NEG_INFINITY };
        let g = gradient(&f, &[5e-5]).unwrap();
        assert!((g[0] - 2e4).abs() / 2e4 < 5e-2);
        let f = |_: &[f64]| f64::NAN;
        assert!(gradient(&f, &[1.0]).unwrap_err().is_numerical());
        assert!(gradient_hessian(&|x: &[f64]| if x[0] == 1.0 { 0.0 } else { f64::NAN }, &[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn hessian_is_symmetric(x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let f = |y: &[f64]| (y[0] * y[1]).sin() + y[2].exp() * y[3] + y[0].powi(3) * y[2];
            let h = hessian(&f, &x).unwrap();
            prop_assert_eq!(h.clone(), h.transpose());
        }
    }
}

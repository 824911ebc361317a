//! Clamped B-spline bases evaluated with the triangular (de Boor) scheme.
//!
//! Shared by the time-varying influence regressors and the monotone spline
//! links.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    order: usize,
}

/// Basis values at one point; `clamped` is set when the point fell outside
/// the boundary knots and was moved onto the nearest boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub values: Vec<f64>,
    pub clamped: bool,
}

impl BSplineBasis {
    /// Clamped basis of the given order (degree + 1) with boundary knots
    /// repeated `order` times.
    pub fn clamped(lower: f64, upper: f64, internal: &[f64], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::spec("B-spline order must be at least 1"));
        }
        if !(lower.is_finite() && upper.is_finite()) || lower >= upper {
            return Err(Error::spec(format!(
                "boundary knots must satisfy lower < upper (got {lower}, {upper})"
            )));
        }
        let mut prev = lower;
        for &k in internal {
            if !k.is_finite() || k <= prev || k >= upper {
                return Err(Error::spec(format!(
                    "internal knots must be sorted and strictly inside ({lower}, {upper}); got {internal:?}"
                )));
            }
            prev = k;
        }
        let mut knots = Vec::with_capacity(internal.len() + 2 * order);
        knots.extend(std::iter::repeat_n(lower, order));
        knots.extend_from_slice(internal);
        knots.extend(std::iter::repeat_n(upper, order));
        Ok(BSplineBasis { knots, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.knots.len() - self.order
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index `mu` of the knot span with `t[mu] <= x < t[mu+1]`; the right
    /// boundary belongs to the last non-degenerate span.
    fn span(&self, x: f64) -> usize {
        let k = self.order;
        let n = self.len();
        if x >= self.knots[n] {
            return n - 1;
        }
        // first index > x, minus one
        let upper = self.knots[k..=n].partition_point(|&t| t <= x) + k;
        upper - 1
    }

    /// Nonzero basis values at `x`: returns the index of the first nonzero
    /// function and the `order` values starting there.
    pub fn nonzero(&self, x: f64) -> (usize, Vec<f64>) {
        let k = self.order;
        let x = x.clamp(self.lower(), self.upper());
        let mu = self.span(x);
        let t = &self.knots;
        let mut values = vec![0.0; k];
        let mut left = vec![0.0; k];
        let mut right = vec![0.0; k];
        values[0] = 1.0;
        for j in 1..k {
            left[j] = x - t[mu + 1 - j];
            right[j] = t[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (mu + 1 - k, values)
    }

    /// Full basis vector at `x`, clamping out-of-range points.
    pub fn eval(&self, x: f64) -> BasisValues {
        let clamped = x < self.lower() || x > self.upper();
        let (first, nz) = self.nonzero(x);
        let mut values = vec![0.0; self.len()];
        values[first..first + nz.len()].copy_from_slice(&nz);
        BasisValues { values, clamped }
    }
}

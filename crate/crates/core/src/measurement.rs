//! Marker-to-latent links and the selection matrices of the measurement model.

use nalgebra::DMatrix;

use crate::bspline::{BSplineBasis, BasisValues};
use crate::error::{Error, Result};

/// Order of the M-splines behind the monotone link (piecewise quadratic).
const MSPLINE_ORDER: usize = 3;

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::spec("a spline link needs at least the two boundary knots"));
    }
    if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::spec(format!("spline knots must be finite and strictly increasing: {knots:?}")));
    }
    Ok(())
}

fn bases(knots: &[f64]) -> Result<(BSplineBasis, BSplineBasis)> {
    check_knots(knots)?;
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let inner = &knots[1..knots.len() - 1];
    Ok((
        BSplineBasis::clamped(lo, hi, inner, MSPLINE_ORDER)?,
        BSplineBasis::clamped(lo, hi, inner, MSPLINE_ORDER + 1)?,
    ))
}

fn mspline_from(b: &BSplineBasis, y: f64) -> BasisValues {
    let k = b.order();
    let t = b.knots();
    let mut out = b.eval(y);
    for (i, v) in out.values.iter_mut().enumerate() {
        let width = t[i + k] - t[i];
        *v = if width > 0.0 { *v * k as f64 / width } else { 0.0 };
    }
    out
}

fn ispline_from(b_next: &BSplineBasis, y: f64) -> BasisValues {
    // I_i = sum_{m > i} B_m of one order higher (clamped knots)
    let full = b_next.eval(y);
    let n = full.values.len() - 1;
    let mut values = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += full.values[i + 1];
        values[i] = acc.min(1.0);
    }
    BasisValues { values, clamped: full.clamped }
}

/// M-spline basis (normalized to unit integral) at `y`.
pub fn mspline_basis(y: f64, knots: &[f64]) -> Result<BasisValues> {
    let (m, _) = bases(knots)?;
    Ok(mspline_from(&m, y))
}

/// I-spline basis (integrated M-splines, rising from 0 to 1) at `y`.
pub fn ispline_basis(y: f64, knots: &[f64]) -> Result<BasisValues> {
    let (_, i) = bases(knots)?;
    Ok(ispline_from(&i, y))
}

/// Knots at empirical quantiles: boundaries at min/max and `internal`
/// interior knots at equally spaced probabilities.
pub fn quantile_knots(values: &[f64], internal: usize) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return Err(Error::data("need at least two finite values to place spline knots"));
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let mut knots: Vec<f64> = (0..=internal + 1).map(|i| q(i as f64 / (internal + 1) as f64)).collect();
    let n = knots.len();
    knots[0] = v[0];
    knots[n - 1] = v[v.len() - 1];
    check_knots(&knots).map_err(|_| {
        Error::data(format!("marker values are too discrete for {internal} quantile knots: {knots:?}"))
    })?;
    Ok(knots)
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Linear,
    ISpline { knots: Vec<f64>, m: BSplineBasis, i: BSplineBasis },
}

/// A marker's link family with its (fixed) knot placement. Parameter values
/// `eta` are passed to each call.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkFunction {
    kind: Kind,
}

/// Precomputed basis values at one observation, so the transform and its
/// Jacobian only need the current `eta`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsBasis {
    Linear(f64),
    ISpline { i: Vec<f64>, m: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped<T> {
    pub value: T,
    pub clamped: bool,
}

impl LinkFunction {
    pub fn linear() -> Self {
        LinkFunction { kind: Kind::Linear }
    }

    /// Monotone link on `knots = [lower, internal..., upper]`.
    pub fn ispline(knots: &[f64]) -> Result<Self> {
        let (m, i) = bases(knots)?;
        Ok(LinkFunction { kind: Kind::ISpline { knots: knots.to_vec(), m, i } })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, Kind::Linear)
    }

    pub fn knots(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Linear => None,
            Kind::ISpline { knots, .. } => Some(knots),
        }
    }

    pub fn n_params(&self) -> usize {
        match &self.kind {
            Kind::Linear => 2,
            Kind::ISpline { m, .. } => m.len() + 1,
        }
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.n_params() {
            return Err(Error::InvalidParameter(format!(
                "link expects {} parameters, got {}",
                self.n_params(),
                eta.len()
            )));
        }
        if self.is_linear() && eta[1] == 0.0 {
            return Err(Error::InvalidParameter("linear link needs eta1 != 0".into()));
        }
        Ok(())
    }

    pub fn obs_basis(&self, y: f64) -> Clamped<ObsBasis> {
        match &self.kind {
            Kind::Linear => Clamped { value: ObsBasis::Linear(y), clamped: false },
            Kind::ISpline { m, i, .. } => {
                let iv = ispline_from(i, y);
                let mv = mspline_from(m, y);
                Clamped { value: ObsBasis::ISpline { i: iv.values, m: mv.values }, clamped: iv.clamped }
            }
        }
    }

    pub fn transform(&self, eta: &[f64], y: f64) -> Result<Clamped<f64>> {
        self.check_eta(eta)?;
        let b = self.obs_basis(y);
        Ok(Clamped { value: transform_cached(eta, &b.value), clamped: b.clamped })
    }

    /// Derivative of the transform with respect to the marker value.
    pub fn jacobian(&self, eta: &[f64], y: f64) -> Result<f64> {
        self.check_eta(eta)?;
        Ok(jacobian_cached(eta, &self.obs_basis(y).value))
    }

    /// Transformed-scale range `[H(lower), H(upper)]`; unbounded for linear links.
    pub fn range(&self, eta: &[f64]) -> (f64, f64) {
        match &self.kind {
            Kind::Linear => (f64::NEG_INFINITY, f64::INFINITY),
            Kind::ISpline { .. } => (eta[0], eta[0] + eta[1..].iter().map(|e| e * e).sum::<f64>()),
        }
    }

    /// Marker value whose transform equals `ytilde`; values beyond the
    /// transformed range are clamped onto the boundary knots.
    pub fn inverse(&self, eta: &[f64], ytilde: f64, marker: &str) -> Result<Clamped<f64>> {
        self.check_eta(eta)?;
        match &self.kind {
            Kind::Linear => Ok(Clamped { value: eta[0] + eta[1] * ytilde, clamped: false }),
            Kind::ISpline { knots, .. } => {
                let (lo_t, hi_t) = self.range(eta);
                if !(hi_t > lo_t) {
                    return Err(Error::NonInvertible(marker.to_string()));
                }
                let (lo, hi) = (knots[0], knots[knots.len() - 1]);
                if ytilde <= lo_t {
                    return Ok(Clamped { value: lo, clamped: ytilde < lo_t });
                }
                if ytilde >= hi_t {
                    return Ok(Clamped { value: hi, clamped: ytilde > hi_t });
                }
                let (mut a, mut b) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    let h = transform_cached(eta, &self.obs_basis(mid).value);
                    if (h - ytilde).abs() <= 1e-11 || b - a <= f64::EPSILON * hi.abs().max(1.0) {
                        return Ok(Clamped { value: mid, clamped: false });
                    }
                    if h < ytilde {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                Ok(Clamped { value: 0.5 * (a + b), clamped: false })
            }
        }
    }
}

pub fn transform_cached(eta: &[f64], b: &ObsBasis) -> f64 {
    match b {
        ObsBasis::Linear(y) => (y - eta[0]) / eta[1],
        ObsBasis::ISpline { i, .. } => eta[0] + eta[1..].iter().zip(i).map(|(e, v)| e * e * v).sum::<f64>(),
    }
}

pub fn jacobian_cached(eta: &[f64], b: &ObsBasis) -> f64 {
    match b {
        ObsBasis::Linear(_) => 1.0 / eta[1],
        ObsBasis::ISpline { m, .. } => eta[1..].iter().zip(m).map(|(e, v)| e * e * v).sum(),
    }
}

/// `K x D` marker-to-dimension matrix.
pub fn selection_p(marker_dim: &[usize], n_dims: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(marker_dim.len(), n_dims);
    for (k, &d) in marker_dim.iter().enumerate() {
        p[(k, d)] = 1.0;
    }
    p
}

/// `K* x K` matrix selecting the observed markers of one occasion, in marker order.
pub fn build_m(observed: &[bool]) -> Result<DMatrix<f64>> {
    let rows: Vec<usize> = observed.iter().enumerate().filter(|(_, &o)| o).map(|(k, _)| k).collect();
    if rows.is_empty() {
        return Err(Error::data("occasion without any observed marker"));
    }
    let mut m = DMatrix::zeros(rows.len(), observed.len());
    for (r, &k) in rows.iter().enumerate() {
        m[(r, k)] = 1.0;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KNOTS: [f64; 4] = [0.0, 1.2, 3.5, 5.0];

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn basis_sizes_and_boundaries() {
        let lo = ispline_basis(0.0, &KNOTS).unwrap().values;
        let hi = ispline_basis(5.0, &KNOTS).unwrap().values;
        assert_eq!(lo.len(), KNOTS.len() - 2 + 3);
        assert!(lo.iter().all(|&v| v == 0.0));
        assert!(hi.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn ispline_is_integral_of_mspline() {
        for &y in &[0.3, 1.2, 2.0, 3.49, 4.4, 5.0] {
            let iv = ispline_basis(y, &KNOTS).unwrap().values;
            for m in 0..iv.len() {
                // integrate piecewise so the quadrature never straddles a knot
                let mut integral = 0.0;
                let mut a = KNOTS[0];
                for &k in KNOTS[1..].iter().chain(std::iter::once(&y)) {
                    let b = k.min(y);
                    if b > a {
                        integral += simpson(|x| mspline_basis(x, &KNOTS).unwrap().values[m], a, b, 200);
                        a = b;
                    }
                }
                assert!((iv[m] - integral).abs() < 1e-8, "y={y} m={m}: {} vs {integral}", iv[m]);
            }
        }
    }

    #[test]
    fn mspline_integrates_to_one() {
        for m in 0..5 {
            let mut total = 0.0;
            for w in KNOTS.windows(2) {
                total += simpson(|x| mspline_basis(x, &KNOTS).unwrap().values[m], w[0], w[1], 100);
            }
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn unsorted_knots_rejected() {
        assert!(ispline_basis(1.0, &[0.0, 2.0, 1.0, 3.0]).is_err());
        assert!(LinkFunction::ispline(&[1.0]).is_err());
    }

    #[test]
    fn linear_transform_at_location_is_zero() {
        let link = LinkFunction::linear();
        assert_eq!(link.transform(&[3.878, 2.678], 3.878).unwrap().value, 0.0);
        assert!((link.jacobian(&[3.878, 2.678], 1.0).unwrap() - 0.3734).abs() < 5e-5);
        assert_eq!(link.inverse(&[3.878, 2.678], 0.0, "Y").unwrap().value, 3.878);
        assert!(link.transform(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn degenerate_spline_is_constant() {
        let link = LinkFunction::ispline(&KNOTS).unwrap();
        let eta = [0.7, 0.0, 0.0, 0.0, 0.0, 0.0];
        for &y in &[0.0, 1.0, 4.9] {
            assert_eq!(link.transform(&eta, y).unwrap().value, 0.7);
            assert_eq!(link.jacobian(&eta, y).unwrap(), 0.0);
        }
        assert!(matches!(link.inverse(&eta, 0.7, "Y"), Err(Error::NonInvertible(_))));
    }

    #[test]
    fn spline_upper_boundary_value() {
        let link = LinkFunction::ispline(&KNOTS).unwrap();
        let eta = [-1.0, 0.5, 1.1, -0.3, 0.8, 0.9];
        let top = link.transform(&eta, 5.0).unwrap().value;
        let expect = -1.0 + eta[1..].iter().map(|e| e * e).sum::<f64>();
        assert!((top - expect).abs() < 1e-14);
    }

    #[test]
    fn inverse_clamps_above_range() {
        let link = LinkFunction::ispline(&KNOTS).unwrap();
        let eta = [-1.0, 0.5, 1.1, -0.3, 0.8, 0.9];
        let r = link.inverse(&eta, 100.0, "Y").unwrap();
        assert!(r.clamped);
        assert_eq!(r.value, 5.0);
        let t = link.transform(&eta, 9.0).unwrap();
        assert!(t.clamped);
    }

    #[test]
    fn selection_matrices() {
        assert_eq!(build_m(&[true, true, true]).unwrap(), DMatrix::<f64>::identity(3, 3));
        let m = build_m(&[true, false, true]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        assert!(build_m(&[false, false]).is_err());
        let p = selection_p(&[0, 0, 1], 2);
        let ptp = p.transpose() * &p;
        assert_eq!(ptp, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn quantile_knots_place_terciles() {
        let v: Vec<f64> = (0..=30).map(|i| i as f64).collect();
        let k = quantile_knots(&v, 2).unwrap();
        assert_eq!(k, vec![0.0, 10.0, 20.0, 30.0]);
        assert!(quantile_knots(&[1.0, 1.0, 1.0], 1).is_err());
    }
}

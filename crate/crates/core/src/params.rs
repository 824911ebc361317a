//! Structured parameters and their flat, optimizer-facing representation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{CholeskyEntry, LinkSpec, ModelSpec, Structure};

/// Parameters in structured form.
///
/// `alpha` is stored densely as `D x D x r` (index `(d * D + d2) * r + m`);
/// entries that the structure does not estimate are held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub l_free: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Beta,
    Gamma,
    Cholesky,
    Alpha,
    Sigma,
    Eta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
}

/// Ordering of the free parameters: beta, gamma, free Cholesky entries
/// (column-major), active influence coefficients, residual scales, link
/// parameters.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub structure: Structure,
    pub correlated_baseline: bool,
    /// `(row, col)` of each free Cholesky entry, column-major.
    pub l_positions: Vec<(usize, usize)>,
    /// Flat indices into `Theta::alpha` of the active influence coefficients.
    pub alpha_positions: Vec<usize>,
    pub eta_sizes: Vec<usize>,
    /// Per marker: measured through a linear link.
    pub linear_markers: Vec<bool>,
    pub params: Vec<ParamInfo>,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let s = spec.structure()?;
        let nd = s.n_dims;
        let nr = s.n_random();
        let r = s.r();
        let mut params = Vec::new();
        for d in 0..nd {
            for t in &s.baseline[d] {
                params.push(ParamInfo { name: format!("beta[{}].{}", spec.dimensions[d], t.name()), kind: ParamKind::Beta });
            }
        }
        for d in 0..nd {
            for t in &s.trend[d] {
                params.push(ParamInfo { name: format!("gamma[{}].{}", spec.dimensions[d], t.name()), kind: ParamKind::Gamma });
            }
        }
        let mut l_positions = Vec::new();
        for j in 0..nr {
            for i in j..nr {
                if s.cholesky_entry(i, j, spec.correlated_baseline) == CholeskyEntry::Free {
                    l_positions.push((i, j));
                    params.push(ParamInfo { name: format!("L({},{})", i + 1, j + 1), kind: ParamKind::Cholesky });
                }
            }
        }
        let mut alpha_positions = Vec::new();
        for d in 0..nd {
            for d2 in 0..nd {
                for m in 0..r {
                    if s.influence_active(d, d2, m) {
                        alpha_positions.push((d * nd + d2) * r + m);
                        params.push(ParamInfo {
                            name: format!(
                                "alpha[{},{}].{}",
                                spec.dimensions[d],
                                spec.dimensions[d2],
                                s.influence[m].name()
                            ),
                            kind: ParamKind::Alpha,
                        });
                    }
                }
            }
        }
        for m in &spec.markers {
            params.push(ParamInfo { name: format!("sigma[{}]", m.name), kind: ParamKind::Sigma });
        }
        let eta_sizes: Vec<usize> = spec.markers.iter().map(|m| m.link.n_params()).collect();
        for (m, &n) in spec.markers.iter().zip(&eta_sizes) {
            for e in 0..n {
                params.push(ParamInfo { name: format!("eta[{}].{e}", m.name), kind: ParamKind::Eta });
            }
        }
        Ok(ParamLayout {
            structure: s,
            correlated_baseline: spec.correlated_baseline,
            l_positions,
            alpha_positions,
            eta_sizes,
            linear_markers: spec.markers.iter().map(|m| matches!(m.link, LinkSpec::Linear)).collect(),
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn alpha_len(&self) -> usize {
        let nd = self.structure.n_dims;
        nd * nd * self.structure.r()
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(&self) -> Theta {
        Theta {
            beta: vec![0.0; self.structure.p0()],
            gamma: vec![0.0; self.structure.p()],
            l_free: vec![0.0; self.l_positions.len()],
            alpha: vec![0.0; self.alpha_len()],
            sigma: vec![0.0; self.structure.n_markers],
            eta: self.eta_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn check_shapes(&self, t: &Theta) -> Result<()> {
        let mismatch = |what: &str, got: usize, want: usize| {
            Error::spec(format!("{what} has {got} entries, expected {want}"))
        };
        if t.beta.len() != self.structure.p0() {
            return Err(mismatch("beta", t.beta.len(), self.structure.p0()));
        }
        if t.gamma.len() != self.structure.p() {
            return Err(mismatch("gamma", t.gamma.len(), self.structure.p()));
        }
        if t.l_free.len() != self.l_positions.len() {
            return Err(mismatch("L", t.l_free.len(), self.l_positions.len()));
        }
        if t.alpha.len() != self.alpha_len() {
            return Err(mismatch("alpha", t.alpha.len(), self.alpha_len()));
        }
        if t.sigma.len() != self.structure.n_markers {
            return Err(mismatch("sigma", t.sigma.len(), self.structure.n_markers));
        }
        if t.eta.len() != self.eta_sizes.len() {
            return Err(mismatch("eta", t.eta.len(), self.eta_sizes.len()));
        }
        for (k, (e, &n)) in t.eta.iter().zip(&self.eta_sizes).enumerate() {
            if e.len() != n {
                return Err(mismatch(&format!("eta of marker {k}"), e.len(), n));
            }
        }
        Ok(())
    }

    pub fn pack(&self, t: &Theta) -> Result<Vec<f64>> {
        self.check_shapes(t)?;
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&t.beta);
        out.extend_from_slice(&t.gamma);
        out.extend_from_slice(&t.l_free);
        out.extend(self.alpha_positions.iter().map(|&i| t.alpha[i]));
        out.extend_from_slice(&t.sigma);
        for e in &t.eta {
            out.extend_from_slice(e);
        }
        Ok(out)
    }

    pub fn unpack(&self, flat: &[f64]) -> Result<Theta> {
        if flat.len() != self.n_params() {
            return Err(Error::spec(format!(
                "parameter vector has {} entries, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let beta = take(self.structure.p0());
        let gamma = take(self.structure.p());
        let l_free = take(self.l_positions.len());
        let active = take(self.alpha_positions.len());
        let sigma = take(self.structure.n_markers);
        let eta = self.eta_sizes.iter().map(|&n| take(n)).collect();
        let mut alpha = vec![0.0; self.alpha_len()];
        for (&pos, v) in self.alpha_positions.iter().zip(active) {
            alpha[pos] = v;
        }
        Ok(Theta { beta, gamma, l_free, alpha, sigma, eta })
    }

    /// Lower-triangular Cholesky factor with its fixed ones and zeros.
    pub fn assemble_l(&self, l_free: &[f64]) -> DMatrix<f64> {
        let nr = self.structure.n_random();
        let mut l = DMatrix::zeros(nr, nr);
        for i in 0..self.structure.n_dims {
            l[(i, i)] = 1.0;
        }
        for (&(i, j), &v) in self.l_positions.iter().zip(l_free) {
            l[(i, j)] = v;
        }
        l
    }

    /// Random-effect covariance `B = L L'`.
    pub fn assemble_b(&self, l_free: &[f64]) -> DMatrix<f64> {
        let l = self.assemble_l(l_free);
        &l * l.transpose()
    }

    /// Influence coefficient `alpha_{d d2}^m`.
    pub fn alpha_at(&self, t: &Theta, d: usize, d2: usize, m: usize) -> f64 {
        let nd = self.structure.n_dims;
        t.alpha[(d * nd + d2) * self.structure.r() + m]
    }

    pub fn set_alpha(&self, t: &mut Theta, d: usize, d2: usize, m: usize, v: f64) {
        let nd = self.structure.n_dims;
        t.alpha[(d * nd + d2) * self.structure.r() + m] = v;
    }

    /// Representative of `flat` among parameter vectors with the same
    /// likelihood: `sigma >= 0`, I-spline `eta_m >= 0`, free Cholesky
    /// diagonals `>= 0`, and a positive slope for the first marker of every
    /// process measured only through linear links. Flipping such a process
    /// negates its regression effects, its random effects, its cross
    /// influences and its markers' slopes.
    pub fn canonical(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let mut t = self.unpack(flat)?;
        let s = &self.structure;
        let nd = s.n_dims;
        let r = s.r();
        for d in 0..nd {
            let markers: Vec<usize> = (0..s.n_markers).filter(|&k| s.marker_dim[k] == d).collect();
            let flippable = markers.iter().all(|&k| self.linear_markers[k]);
            if !flippable || markers.first().is_none_or(|&k| t.eta[k][1] >= 0.0) {
                continue;
            }
            let b0 = s.baseline_offset(d);
            t.beta[b0..b0 + s.baseline[d].len()].iter_mut().for_each(|v| *v = -*v);
            let g0 = s.trend_offset(d);
            t.gamma[g0..g0 + s.trend[d].len()].iter_mut().for_each(|v| *v = -*v);
            for d2 in (0..nd).filter(|&d2| d2 != d) {
                for m in 0..r {
                    t.alpha[(d * nd + d2) * r + m] *= -1.0;
                    t.alpha[(d2 * nd + d) * r + m] *= -1.0;
                }
            }
            // L -> S L S keeps the diagonal and gives B -> S B S
            for (p, &(i, j)) in self.l_positions.iter().enumerate() {
                if (s.random_owner(i) == d) != (s.random_owner(j) == d) {
                    t.l_free[p] = -t.l_free[p];
                }
            }
            for &k in &markers {
                t.eta[k][1] = -t.eta[k][1];
            }
        }
        // columns of L with a free diagonal carry an arbitrary sign
        for (p, &(i, j)) in self.l_positions.iter().enumerate() {
            if i == j && t.l_free[p] < 0.0 {
                for (q, &(_, j2)) in self.l_positions.iter().enumerate() {
                    if j2 == j {
                        t.l_free[q] = -t.l_free[q];
                    }
                }
            }
        }
        t.sigma.iter_mut().for_each(|v| *v = v.abs());
        for (k, eta) in t.eta.iter_mut().enumerate() {
            if !self.linear_markers[k] {
                eta[1..].iter_mut().for_each(|v| *v = v.abs());
            }
        }
        self.pack(&t)
    }

    /// Index of the free Cholesky entry at `(row, col)` (0-based), if free.
    pub fn l_index(&self, row: usize, col: usize) -> Option<usize> {
        self.l_positions.iter().position(|&p| p == (row, col))
    }
}

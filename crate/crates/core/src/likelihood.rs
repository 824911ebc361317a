//! Marginal log-likelihood of the transformed markers.
//!
//! Given the parameters, each subject's observed transformed markers are
//! Gaussian with mean `mu_j[d(k)]` and covariance
//! `V = (A L)(A L)' + diag(sigma^2)`, where row `i` of `A` is the random-effect
//! loading of the latent dimension behind observation `i`. Because `L` has
//! only `D + q` columns the density is evaluated through the small capacitance
//! matrix `I + (AL)' Sigma^{-1} (AL)`; a dense Cholesky with a jitter ladder is
//! used when some `sigma_k` is zero.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::data::{Dataset, SubjectData};
use crate::design::{build_design, DesignSet};
use crate::error::{Error, Result};
use crate::measurement::{jacobian_cached, quantile_knots, transform_cached, LinkFunction, ObsBasis};
use crate::numdiff;
use crate::params::{ParamLayout, Theta};
use crate::spec::{LinkSpec, ModelSpec};
use crate::structural::{latent_paths, LatentPaths};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal loadings tried, in order, when a covariance is not numerically
/// positive definite.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor of a symmetric matrix, adding the smallest jitter from
/// [`JITTER_LADDER`] that makes it positive definite.
pub fn cholesky_jitter(v: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let finite = |c: &Cholesky<f64, Dyn>| c.l_dirty().iter().all(|x| x.is_finite());
    if let Some(c) = Cholesky::new(v.clone()).filter(finite) {
        return Ok(c);
    }
    for eps in JITTER_LADDER {
        let mut w = v.clone();
        for i in 0..w.nrows() {
            w[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(w).filter(finite) {
            return Ok(c);
        }
    }
    Err(Error::numerical("covariance matrix is not positive definite even after jitter"))
}

/// Gaussian log-density of `r ~ N(0, V)` from the Cholesky factor of `V`.
pub fn gaussian_logpdf(chol: &Cholesky<f64, Dyn>, r: &DVector<f64>) -> f64 {
    let l = chol.l_dirty();
    let z = l.solve_lower_triangular(r).expect("non-singular factor");
    let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    -0.5 * (r.len() as f64 * LN_2PI + logdet + z.norm_squared())
}

/// Fill in quantile-placed knots for spline links that do not fix them.
pub fn resolve_knots(spec: &ModelSpec, data: &Dataset) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for m in &mut out.markers {
        if let LinkSpec::Ispline { internal_knots, knots } = &mut m.link {
            if knots.is_none() {
                *knots = Some(quantile_knots(&data.marker_values(&m.name), *internal_knots)?);
            }
        }
    }
    Ok(out)
}

/// Link functions of a spec whose spline knots are resolved.
pub fn build_links(spec: &ModelSpec) -> Result<Vec<LinkFunction>> {
    spec.markers
        .iter()
        .map(|m| match &m.link {
            LinkSpec::Linear => Ok(LinkFunction::linear()),
            LinkSpec::Ispline { internal_knots, knots } => {
                let k = knots.as_ref().ok_or_else(|| Error::spec(format!("marker {}: knots not resolved", m.name)))?;
                if k.len() != internal_knots + 2 {
                    return Err(Error::spec(format!(
                        "marker {}: {} knots given for {} internal knots",
                        m.name,
                        k.len(),
                        internal_knots
                    )));
                }
                LinkFunction::ispline(k)
            }
        })
        .collect()
}

/// One observed marker value with its basis cached for the link.
#[derive(Debug, Clone)]
pub struct Observation {
    pub grid_index: usize,
    pub marker: usize,
    pub value: f64,
    pub basis: ObsBasis,
}

/// Moments of one subject's observed transformed markers.
#[derive(Debug, Clone)]
pub struct SubjectMoments {
    /// `(grid index, marker)` of each entry, in occasion then marker order.
    pub cells: Vec<(usize, usize)>,
    pub ytilde: DVector<f64>,
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Sum of log link Jacobians.
    pub log_jacobian: f64,
}

/// A dataset bound to a model: everything that does not depend on the
/// parameter values is computed once here.
#[derive(Debug, Clone)]
pub struct Problem {
    spec: ModelSpec,
    layout: ParamLayout,
    links: Vec<LinkFunction>,
    subjects: Vec<SubjectData>,
    designs: Vec<DesignSet>,
    subject_design: Vec<usize>,
    obs: Vec<Vec<Observation>>,
    /// Subjects sharing a design and the same observed `(grid, marker)`
    /// cells share the capacitance matrix.
    patterns: Vec<Pattern>,
    n_clamped: usize,
}

#[derive(Debug, Clone)]
struct Pattern {
    design: usize,
    cells: Vec<(usize, usize)>,
    subjects: Vec<usize>,
}

/// Per-pattern part of the capacitance evaluation.
struct PatternFactor {
    /// `c_r = L' W_j[d, :]'` scaled by `1 / s_r`, one row per cell.
    scaled: DMatrix<f64>,
    /// Lower Cholesky factor of `I + sum c c' / s`.
    lower: DMatrix<f64>,
    /// `n log 2pi + sum log s + log det G`.
    constant: f64,
}

fn design_key(covariates: &BTreeMap<String, f64>, names: &[String]) -> Vec<u64> {
    names.iter().map(|n| covariates.get(n).map(|v| v.to_bits()).unwrap_or(u64::MAX)).collect()
}

impl Problem {
    /// Resolve spline knots from `data`, then bind it to the grid.
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Problem> {
        let spec = resolve_knots(spec, data)?;
        let subjects = data.bind(&spec)?;
        Problem::from_subjects(spec, subjects)
    }

    /// Build from already bound subjects (sorted by id).
    pub fn from_subjects(spec: ModelSpec, subjects: Vec<SubjectData>) -> Result<Problem> {
        spec.validate()?;
        let layout = ParamLayout::new(&spec)?;
        let links = build_links(&spec)?;
        if subjects.is_empty() {
            return Err(Error::data("no subjects"));
        }
        let names: Vec<String> = spec.covariate_names()?.into_iter().collect();
        let mut keys: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut designs = Vec::new();
        let mut subject_design = Vec::with_capacity(subjects.len());
        let mut obs = Vec::with_capacity(subjects.len());
        let mut n_clamped = 0;
        for s in &subjects {
            if s.horizon() > spec.grid_len {
                return Err(Error::data(format!("subject {} extends beyond the grid", s.id)));
            }
            let key = design_key(&s.covariates, &names);
            let idx = match keys.get(&key) {
                Some(&i) => i,
                None => {
                    let d = build_design(&layout.structure, spec.delta, &s.covariates, spec.grid_len)
                        .map_err(|e| Error::data(format!("subject {}: {e}", s.id)))?;
                    designs.push(d);
                    keys.insert(key, designs.len() - 1);
                    designs.len() - 1
                }
            };
            subject_design.push(idx);
            let mut list = Vec::new();
            for occ in &s.occasions {
                for (k, y) in occ.values.iter().enumerate() {
                    if let Some(y) = *y {
                        let b = links[k].obs_basis(y);
                        n_clamped += b.clamped as usize;
                        list.push(Observation { grid_index: occ.grid_index, marker: k, value: y, basis: b.value });
                    }
                }
            }
            obs.push(list);
        }
        let mut pattern_index: BTreeMap<(usize, Vec<(usize, usize)>), usize> = BTreeMap::new();
        let mut patterns: Vec<Pattern> = Vec::new();
        for (i, list) in obs.iter().enumerate() {
            let cells: Vec<(usize, usize)> = list.iter().map(|o| (o.grid_index, o.marker)).collect();
            let key = (subject_design[i], cells);
            let idx = *pattern_index.entry(key.clone()).or_insert_with(|| {
                patterns.push(Pattern { design: key.0, cells: key.1, subjects: Vec::new() });
                patterns.len() - 1
            });
            patterns[idx].subjects.push(i);
        }
        Ok(Problem { spec, layout, links, subjects, designs, subject_design, obs, patterns, n_clamped })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn links(&self) -> &[LinkFunction] {
        &self.links
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn design(&self, subject: usize) -> &DesignSet {
        &self.designs[self.subject_design[subject]]
    }

    pub fn observations(&self, subject: usize) -> &[Observation] {
        &self.obs[subject]
    }

    /// Observations outside a spline link's boundary knots (clamped).
    pub fn n_clamped(&self) -> usize {
        self.n_clamped
    }

    pub fn n_observations(&self) -> usize {
        self.obs.iter().map(Vec::len).sum()
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        for (k, (link, eta)) in self.links.iter().zip(&theta.eta).enumerate() {
            if link.is_linear() && eta[1] == 0.0 {
                return Err(Error::InvalidParameter(format!("marker {}: eta1 is zero", self.spec.markers[k].name)));
            }
        }
        if theta.beta.iter().chain(&theta.gamma).chain(&theta.l_free).chain(&theta.alpha).chain(&theta.sigma).chain(theta.eta.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        Ok(())
    }

    fn paths(&self, theta: &Theta) -> Result<Vec<LatentPaths>> {
        self.designs.par_iter().map(|d| latent_paths(d, theta, &self.layout)).collect()
    }

    /// Per-subject log-likelihood contributions, in subject order. Numerical
    /// failures of single subjects come back as `-inf`.
    pub fn contributions(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let theta = self.layout.unpack(flat)?;
        self.check_theta(&theta)?;
        let paths = self.paths(&theta)?;
        let l = self.layout.assemble_l(&theta.l_free);
        if theta.sigma.contains(&0.0) {
            return Ok((0..self.subjects.len())
                .into_par_iter()
                .map(|i| match self.dense_loglik(&theta, &paths[self.subject_design[i]], &l, i) {
                    Ok(v) if v.is_finite() => v,
                    _ => f64::NEG_INFINITY,
                })
                .collect());
        }
        let factors: Vec<Option<PatternFactor>> =
            self.patterns.par_iter().map(|p| self.pattern_factor(p, &paths[p.design], &l, &theta)).collect();
        let mut out = vec![f64::NEG_INFINITY; self.subjects.len()];
        let per_pattern: Vec<Vec<f64>> = self
            .patterns
            .par_iter()
            .zip(&factors)
            .map(|(p, f)| match f {
                Some(f) => p.subjects.iter().map(|&i| self.capacitance_loglik(f, &paths[p.design], i, &theta)).collect(),
                None => vec![f64::NEG_INFINITY; p.subjects.len()],
            })
            .collect();
        for (p, values) in self.patterns.iter().zip(per_pattern) {
            for (&i, v) in p.subjects.iter().zip(values) {
                out[i] = if v.is_finite() { v } else { f64::NEG_INFINITY };
            }
        }
        Ok(out)
    }

    fn pattern_factor(&self, p: &Pattern, paths: &LatentPaths, l: &DMatrix<f64>, theta: &Theta) -> Option<PatternFactor> {
        let marker_dim = &self.layout.structure.marker_dim;
        let nr = l.ncols();
        let n = p.cells.len();
        let mut c = DMatrix::<f64>::zeros(n, nr);
        let mut scaled = DMatrix::<f64>::zeros(n, nr);
        let mut log_s = 0.0;
        for (r, &(g, k)) in p.cells.iter().enumerate() {
            let s = theta.sigma[k] * theta.sigma[k];
            let row = paths.loading[g].row(marker_dim[k]) * l;
            c.row_mut(r).copy_from(&row);
            scaled.row_mut(r).copy_from(&(row / s));
            log_s += s.ln();
        }
        let mut g = scaled.tr_mul(&c);
        for i in 0..nr {
            g[(i, i)] += 1.0;
        }
        let g = (&g + g.transpose()) * 0.5;
        let chol = Cholesky::new(g)?;
        let lower = chol.l();
        let logdet: f64 = 2.0 * (0..nr).map(|i| lower[(i, i)].ln()).sum::<f64>();
        Some(PatternFactor { scaled, lower, constant: n as f64 * LN_2PI + log_s + logdet })
    }

    /// Log-density through the matrix determinant lemma and Woodbury
    /// identity; needs every `sigma_k` non-zero.
    fn capacitance_loglik(&self, f: &PatternFactor, paths: &LatentPaths, i: usize, theta: &Theta) -> f64 {
        let marker_dim = &self.layout.structure.marker_dim;
        let obs = &self.obs[i];
        let mut r = DVector::<f64>::zeros(obs.len());
        let mut quad = 0.0;
        let mut log_jac = 0.0;
        for (row, o) in obs.iter().enumerate() {
            let eta = &theta.eta[o.marker];
            let s = theta.sigma[o.marker] * theta.sigma[o.marker];
            let v = transform_cached(eta, &o.basis) - paths.mean[o.grid_index][marker_dim[o.marker]];
            r[row] = v;
            quad += v * v / s;
            log_jac += jacobian_cached(eta, &o.basis).abs().ln();
        }
        let b = f.scaled.tr_mul(&r);
        let Some(z) = f.lower.solve_lower_triangular(&b) else { return f64::NEG_INFINITY };
        -0.5 * (f.constant + quad - z.norm_squared()) + log_jac
    }

    /// Total log-likelihood, summed in subject order; `Err` only for a
    /// parameter vector of the wrong length or invalid link parameters.
    pub fn try_loglik(&self, flat: &[f64]) -> Result<f64> {
        let c = self.contributions(flat)?;
        let mut total = 0.0;
        for v in c {
            total += v;
        }
        Ok(if total.is_nan() { f64::NEG_INFINITY } else { total })
    }

    /// Total log-likelihood with `-inf` for any invalid or failed evaluation.
    pub fn loglik(&self, flat: &[f64]) -> f64 {
        self.try_loglik(flat).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn subject_loglik(&self, flat: &[f64], subject: usize) -> Result<f64> {
        Ok(self.contributions(flat)?[subject])
    }

    pub fn gradient(&self, flat: &[f64]) -> Result<Vec<f64>> {
        numdiff::gradient(&|x: &[f64]| self.loglik(x), flat)
    }

    pub fn hessian(&self, flat: &[f64]) -> Result<DMatrix<f64>> {
        numdiff::hessian(&|x: &[f64]| self.loglik(x), flat)
    }

    /// Full mean and covariance of one subject's observed transformed markers.
    pub fn subject_moments(&self, theta: &Theta, subject: usize) -> Result<SubjectMoments> {
        self.check_theta(theta)?;
        let paths = latent_paths(self.design(subject), theta, &self.layout)?;
        let l = self.layout.assemble_l(&theta.l_free);
        Ok(self.moments_from(theta, &paths, &l, subject))
    }

    fn moments_from(&self, theta: &Theta, paths: &LatentPaths, l: &DMatrix<f64>, subject: usize) -> SubjectMoments {
        let obs = &self.obs[subject];
        let marker_dim = &self.layout.structure.marker_dim;
        let n = obs.len();
        let nr = l.ncols();
        let mut a = DMatrix::zeros(n, nr);
        let mut mu = DVector::zeros(n);
        let mut ytilde = DVector::zeros(n);
        let mut log_jacobian = 0.0;
        for (r, o) in obs.iter().enumerate() {
            let d = marker_dim[o.marker];
            a.row_mut(r).copy_from(&paths.loading[o.grid_index].row(d));
            mu[r] = paths.mean[o.grid_index][d];
            let eta = &theta.eta[o.marker];
            ytilde[r] = transform_cached(eta, &o.basis);
            log_jacobian += jacobian_cached(eta, &o.basis).abs().ln();
        }
        let al = a * l;
        let mut v = &al * al.transpose();
        for (r, o) in obs.iter().enumerate() {
            v[(r, r)] += theta.sigma[o.marker].powi(2);
        }
        SubjectMoments {
            cells: obs.iter().map(|o| (o.grid_index, o.marker)).collect(),
            ytilde,
            mu,
            v,
            log_jacobian,
        }
    }

    fn dense_loglik(&self, theta: &Theta, paths: &LatentPaths, l: &DMatrix<f64>, subject: usize) -> Result<f64> {
        let m = self.moments_from(theta, paths, l, subject);
        let chol = cholesky_jitter(&m.v)?;
        Ok(gaussian_logpdf(&chol, &(&m.ytilde - &m.mu)) + m.log_jacobian)
    }

    /// Reference evaluation through the dense Cholesky of `V`.
    pub fn subject_loglik_dense(&self, theta: &Theta, subject: usize) -> Result<f64> {
        self.check_theta(theta)?;
        let paths = latent_paths(self.design(subject), theta, &self.layout)?;
        let l = self.layout.assemble_l(&theta.l_free);
        self.dense_loglik(theta, &paths, &l, subject)
    }
}

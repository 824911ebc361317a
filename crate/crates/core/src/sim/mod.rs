//! Data generation for simulation studies.

pub mod stepconv;
pub mod study;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{grid_index, Dataset, Subject, Visit};
use crate::design::build_design;
use crate::error::{Error, Result};
use crate::likelihood::build_links;
use crate::measurement::LinkFunction;
use crate::params::{ParamLayout, Theta};
use crate::spec::ModelSpec;
use crate::structural::Dynamics;

/// Distribution of a subject-level covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateDist {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

impl CovariateDist {
    fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            CovariateDist::Normal { mean, sd } => Ok(Normal::new(mean, sd)
                .map_err(|e| Error::InvalidParameter(format!("normal covariate: {e}")))?
                .sample(rng)),
            CovariateDist::Bernoulli { p } => Ok(Bernoulli::new(p)
                .map_err(|e| Error::InvalidParameter(format!("bernoulli covariate: {e}")))?
                .sample(rng) as u8 as f64),
        }
    }
}

/// Everything needed to draw datasets: the generating model on its own grid,
/// the random-effect covariance on that grid and the visit schedule.
#[derive(Debug, Clone)]
pub struct Truth {
    pub spec: ModelSpec,
    pub theta: Theta,
    /// Covariance of `(u, v)` at the generating step.
    pub b: DMatrix<f64>,
    pub covariates: BTreeMap<String, CovariateDist>,
    /// Visit times, in the time unit of the model.
    pub obs_times: Vec<f64>,
}

/// A simulation scenario: how data are generated and which model is fitted.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub truth: Truth,
    pub fit_spec: ModelSpec,
    /// Generating values in the parametrization of `fit_spec`, when the
    /// fitted model contains the generating one.
    pub fit_truth: Option<Vec<f64>>,
}

fn visits_0_to_6() -> Vec<f64> {
    (0..=6).map(|j| j as f64).collect()
}

fn c1_c2() -> BTreeMap<String, CovariateDist> {
    let mut c = BTreeMap::new();
    c.insert("C1".to_string(), CovariateDist::Normal { mean: 0.0, sd: 0.8 });
    c.insert("C2".to_string(), CovariateDist::Bernoulli { p: 0.37 });
    c
}

/// Scenario with a known generating model fitted as is.
pub fn well_specified(name: &str, spec: ModelSpec, theta: Theta, covariates: BTreeMap<String, CovariateDist>) -> Result<Scenario> {
    let layout = ParamLayout::new(&spec)?;
    let flat = layout.pack(&theta)?;
    let b = layout.assemble_b(&theta.l_free);
    Ok(Scenario {
        name: name.to_string(),
        truth: Truth { spec: spec.clone(), theta, b, covariates, obs_times: visits_0_to_6() },
        fit_spec: spec,
        fit_truth: Some(flat),
    })
}

pub fn scenario1_spec() -> ModelSpec {
    ModelSpec::from_json(
        r#"{
        "dimensions": ["d1", "d2"],
        "markers": [
            {"name": "Y1", "dimension": 0, "link": {"family": "linear"}},
            {"name": "Y2", "dimension": 1, "link": {"family": "linear"}}
        ],
        "delta": 1.0,
        "grid_len": 6,
        "baseline_covariates": ["C1", "C2"],
        "trend_covariates": ["intercept", "C1", "C2"],
        "random_effects": ["intercept"],
        "influence_regressors": ["intercept", "C2"],
        "correlated_baseline": true
    }"#,
    )
    .expect("valid built-in spec")
}

/// Covariate-specific influences (29 parameters).
pub fn scenario1() -> Scenario {
    let spec = scenario1_spec();
    let theta = Theta {
        beta: vec![-0.268, -1.695, 0.057, -1.749],
        gamma: vec![0.042, -0.033, -0.242, -0.097, -0.014, -0.066],
        l_free: vec![0.333, 0.181, 0.066, 0.145, 0.247],
        // (d, d2, m) row-major
        alpha: vec![-0.230, 0.099, 0.118, -0.040, 0.095, 0.043, -0.399, 0.319],
        sigma: vec![0.397, 0.672],
        eta: vec![vec![3.793, 1.597], vec![2.601, 1.226]],
    };
    well_specified("s1", spec, theta, c1_c2()).expect("valid built-in scenario")
}

pub fn scenario2_spec() -> ModelSpec {
    ModelSpec::from_json(
        r#"{
        "dimensions": ["d1", "d2"],
        "markers": [
            {"name": "Y1", "dimension": 0, "link": {"family": "linear"}},
            {"name": "Y2", "dimension": 1, "link": {"family": "linear"}}
        ],
        "delta": 1.0,
        "grid_len": 6,
        "baseline_covariates": ["C2"],
        "trend_covariates": ["intercept"],
        "random_effects": ["intercept"],
        "influence_regressors": ["intercept",
            {"time_bspline": {"degree": 2, "internal_knots": [3.0], "lower": 0.0, "upper": 6.0}}],
        "influence_diag_time_varying": [false, false]
    }"#,
    )
    .expect("valid built-in spec")
}

/// Time-varying influences (24 parameters).
pub fn scenario2() -> Scenario {
    let spec = scenario2_spec();
    let mut alpha = vec![0.0; 16];
    alpha[0] = -0.012;
    alpha[4..8].copy_from_slice(&[0.115, -0.092, -0.028, -0.069]);
    alpha[8..12].copy_from_slice(&[0.134, -0.076, 0.024, -0.140]);
    alpha[12] = 0.009;
    let theta = Theta {
        beta: vec![-1.635, -1.784],
        gamma: vec![0.009, -0.053],
        l_free: vec![0.032, -0.011, 0.094, 0.169],
        alpha,
        sigma: vec![0.376, 0.686],
        eta: vec![vec![3.878, 2.678], vec![2.589, 1.472]],
    };
    let mut covariates = BTreeMap::new();
    covariates.insert("C2".to_string(), CovariateDist::Bernoulli { p: 0.37 });
    well_specified("s2", spec, theta, covariates).expect("valid built-in scenario")
}

fn three_process_spec(delta: f64, grid_len: usize) -> ModelSpec {
    let mut spec = ModelSpec::from_json(
        r#"{
        "dimensions": ["d1", "d2", "d3"],
        "markers": [
            {"name": "Y1", "dimension": 0, "link": {"family": "linear"}},
            {"name": "Y2", "dimension": 1, "link": {"family": "linear"}},
            {"name": "Y3", "dimension": 2, "link": {"family": "linear"}}
        ],
        "delta": 1.0,
        "grid_len": 6,
        "trend_covariates": ["intercept"],
        "random_effects": ["intercept"],
        "influence_regressors": ["intercept"],
        "correlated_baseline": true
    }"#,
    )
    .expect("valid built-in spec");
    spec.delta = delta;
    spec.grid_len = grid_len;
    spec
}

/// Generating step of the near-continuous three-process system.
pub const S3_DELTA_GEN: f64 = 0.001;

/// Parameters of the three-process system at step 1 (30 parameters).
pub fn scenario3_coarse() -> (ModelSpec, Theta) {
    let spec = three_process_spec(1.0, 6);
    let a = [-0.05, 0.03, -0.02, 0.06, -0.08, -0.04, -0.03, -0.10, -0.06];
    let theta = Theta {
        beta: vec![],
        gamma: vec![-0.05, -0.08, 0.10],
        // L(2,1) L(3,1) L(4,1) | L(3,2) L(5,2) | L(6,3) | L(4,4) | L(5,5) | L(6,6)
        l_free: vec![0.5, 0.3, 0.03, 0.3, -0.02, 0.05, 0.10, 0.15, 0.20],
        alpha: a.to_vec(),
        sigma: vec![0.3, 0.4, 0.5],
        eta: vec![vec![1.5, 1.2], vec![0.5, 2.0], vec![-1.0, 1.5]],
    };
    (spec, theta)
}

/// Three-process system with constant influences, generated at step 0.001
/// from the step-1 parameters converted to that scale. `null_entry = (d, d2)`
/// sets that influence to zero on the fine scale. The fitted model uses step
/// `fit_delta`.
pub fn scenario3(null_entry: Option<(usize, usize)>, fit_delta: f64) -> Result<Scenario> {
    let (coarse_spec, coarse) = scenario3_coarse();
    let nd = 3;
    let rho = (1.0 / S3_DELTA_GEN).round() as usize;
    let a_coarse = DMatrix::from_row_slice(nd, nd, &coarse.alpha);
    let a_fine = stepconv::coarse_to_fine(&a_coarse, 1.0, rho)?;
    // trend and random-slope intercepts: gamma_fine = rho (sum Psi)^{-1} gamma*
    let t = stepconv::trend_inverse_operator(&a_fine, 1.0, rho)?;
    let gamma = &t * DVector::from_column_slice(&coarse.gamma);
    let layout = ParamLayout::new(&coarse_spec)?;
    let b_coarse = layout.assemble_b(&coarse.l_free);
    let mut map = DMatrix::identity(2 * nd, 2 * nd);
    map.view_mut((nd, nd), (nd, nd)).copy_from(&t);
    let b = &map * b_coarse * map.transpose();

    let horizon = (6.0 / S3_DELTA_GEN).round() as usize;
    let spec = three_process_spec(S3_DELTA_GEN, horizon);
    let mut alpha: Vec<f64> = (0..nd * nd).map(|i| a_fine[(i / nd, i % nd)]).collect();
    if let Some((d, d2)) = null_entry {
        if d >= nd || d2 >= nd || d == d2 {
            return Err(Error::InvalidParameter(format!("({d}, {d2}) is not an off-diagonal influence")));
        }
        alpha[d * nd + d2] = 0.0;
    }
    let theta = Theta {
        beta: vec![],
        gamma: gamma.as_slice().to_vec(),
        l_free: vec![0.0; layout.l_positions.len()],
        alpha,
        sigma: coarse.sigma.clone(),
        eta: coarse.eta.clone(),
    };
    let grid = (6.0 / fit_delta).round() as usize;
    if (grid as f64 * fit_delta - 6.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("fit step {fit_delta} does not divide the follow-up")));
    }
    Ok(Scenario {
        name: "s3".into(),
        truth: Truth { spec, theta, b, covariates: BTreeMap::new(), obs_times: visits_0_to_6() },
        fit_spec: three_process_spec(fit_delta, grid),
        fit_truth: None,
    })
}

/// Draw one dataset of `n` subjects.
pub fn generate<R: Rng>(truth: &Truth, n: usize, rng: &mut R) -> Result<Dataset> {
    Ok(generate_with_latent(truth, n, rng)?.0)
}

/// As [`generate`], also returning each subject's latent state at every
/// scheduled visit (`[subject][visit][dimension]`).
pub fn generate_with_latent<R: Rng>(truth: &Truth, n: usize, rng: &mut R) -> Result<(Dataset, Vec<Vec<Vec<f64>>>)> {
    let spec = &truth.spec;
    let layout = ParamLayout::new(spec)?;
    let links = build_links(spec)?;
    let nd = spec.n_dims();
    let nr = layout.structure.n_random();
    let chol_b = semidefinite_factor(&truth.b)?;
    if chol_b.nrows() != nr {
        return Err(Error::spec(format!("random-effect covariance is {}x{}, expected {nr}", chol_b.nrows(), chol_b.nrows())));
    }
    let obs: Vec<usize> = truth.obs_times.iter().map(|&t| grid_index(t, spec.delta)).collect();
    let horizon = obs.iter().copied().max().unwrap_or(0);
    if horizon > spec.grid_len {
        return Err(Error::spec("visit schedule extends beyond the generating grid"));
    }
    let names: Vec<String> = spec.covariate_names()?.into_iter().collect();
    for c in &names {
        if !truth.covariates.contains_key(c) {
            return Err(Error::spec(format!("no distribution for covariate {c}")));
        }
    }
    let mut cache: BTreeMap<Vec<u64>, Dynamics> = BTreeMap::new();
    let mut subjects = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let width = n.to_string().len().max(4);
    let mut z = vec![0.0; nr];
    let mut lambda_at = vec![vec![0.0; nd]; obs.len()];
    for i in 0..n {
        let mut cov = BTreeMap::new();
        for (name, dist) in &truth.covariates {
            cov.insert(name.clone(), dist.sample(rng)?);
        }
        let key: Vec<u64> = names.iter().map(|c| cov[c].to_bits()).collect();
        if !cache.contains_key(&key) {
            let design = build_design(&layout.structure, spec.delta, &cov, horizon)?;
            cache.insert(key.clone(), Dynamics::new(&design, &truth.theta, &layout)?);
        }
        let dynamics = &cache[&key];
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let w = &chol_b * DVector::from_column_slice(&z);
        dynamics.run(&w.as_slice()[..nd], &w.as_slice()[nd..], |j, state| {
            for (o, &g) in obs.iter().enumerate() {
                if g == j {
                    lambda_at[o].copy_from_slice(state);
                }
            }
        });
        let mut visits = Vec::with_capacity(obs.len());
        for (o, &time) in truth.obs_times.iter().enumerate() {
            let mut values = Vec::with_capacity(spec.n_markers());
            for (k, m) in spec.markers.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                let ytilde = lambda_at[o][m.dimension] + truth.theta.sigma[k] * e;
                values.push(Some(natural_value(&links[k], &truth.theta.eta[k], ytilde, &m.name)?));
            }
            visits.push(Visit { time, values });
        }
        subjects.push(Subject { id: format!("{:0width$}", i + 1), covariates: cov, visits });
        latent.push(lambda_at.clone());
    }
    Ok((Dataset { markers: spec.markers.iter().map(|m| m.name.clone()).collect(), subjects }, latent))
}

fn natural_value(link: &LinkFunction, eta: &[f64], ytilde: f64, marker: &str) -> Result<f64> {
    Ok(link.inverse(eta, ytilde, marker)?.value)
}

/// Lower factor `F` with `F F' = b` for a positive semidefinite `b`.
fn semidefinite_factor(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = b.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = b.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::InvalidParameter("random-effect covariance is not positive semidefinite".into()));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// MCAR missingness: each visit after the first is dropped with `p_visit`;
/// in the remaining non-baseline visits each marker is dropped with
/// `p_marker`. Baseline visits are kept whole.
pub fn apply_missingness<R: Rng>(data: &Dataset, p_visit: f64, p_marker: f64, rng: &mut R) -> Result<Dataset> {
    for p in [p_visit, p_marker] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("probability {p} outside [0, 1]")));
        }
    }
    let mut out = data.clone();
    for s in &mut out.subjects {
        let baseline = s.visits.iter().map(|v| v.time).fold(f64::INFINITY, f64::min);
        let mut kept = Vec::with_capacity(s.visits.len());
        for v in s.visits.drain(..) {
            if v.time == baseline {
                kept.push(v);
                continue;
            }
            if rng.random_bool(p_visit) {
                continue;
            }
            let values: Vec<Option<f64>> =
                v.values.iter().map(|x| if rng.random_bool(p_marker) { None } else { *x }).collect();
            if values.iter().any(Option::is_some) {
                kept.push(Visit { time: v.time, values });
            }
        }
        s.visits = kept;
    }
    Ok(out)
}

/// Independent RNG stream for replicate `index` under `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Scenario described in JSON: a model, generating values keyed by
/// parameter name, covariate distributions and an optional visit schedule
/// (default `0, 1, ..., grid_len` times `delta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(default = "default_name")]
    pub name: String,
    pub spec: ModelSpec,
    pub parameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub covariates: BTreeMap<String, CovariateDist>,
    #[serde(default)]
    pub obs_times: Option<Vec<f64>>,
}

fn default_name() -> String {
    "custom".to_string()
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn into_scenario(self) -> Result<Scenario> {
        self.spec.validate()?;
        let layout = ParamLayout::new(&self.spec)?;
        let names = layout.names();
        for key in self.parameters.keys() {
            if !names.contains(key) {
                return Err(Error::spec(format!("scenario sets unknown parameter {key}")));
            }
        }
        let flat: Vec<f64> = names
            .iter()
            .map(|n| self.parameters.get(n).copied().ok_or_else(|| Error::spec(format!("scenario lacks a value for {n}"))))
            .collect::<Result<_>>()?;
        let theta = layout.unpack(&flat)?;
        let times = self
            .obs_times
            .clone()
            .unwrap_or_else(|| (0..=self.spec.grid_len).map(|j| j as f64 * self.spec.delta).collect());
        let mut sc = well_specified(&self.name, self.spec, theta, self.covariates)?;
        sc.truth.obs_times = times;
        Ok(sc)
    }
}

/// Named scenario with the default fit step (`s3` is fitted at 1/2).
pub fn scenario_by_name(name: &str) -> Result<Scenario> {
    match name.to_ascii_lowercase().as_str() {
        "s1" => Ok(scenario1()),
        "s2" => Ok(scenario2()),
        "s3" | "s3-continuous" => scenario3(None, 0.5),
        other => Err(Error::spec(format!("unknown scenario {other}; expected s1, s2 or s3"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Problem;
    use crate::structural::{latent_covariance, latent_mean};

    #[test]
    fn builtin_parameter_counts() {
        let s1 = scenario1();
        assert_eq!(ParamLayout::new(&s1.fit_spec).unwrap().n_params(), 29);
        let s2 = scenario2();
        let l2 = ParamLayout::new(&s2.fit_spec).unwrap();
        assert_eq!(l2.n_params(), 24);
        let flat = s2.fit_truth.unwrap();
        assert_eq!(flat[l2.index_of("alpha[d1,d2].intercept").unwrap()], 0.115);
        assert_eq!(flat[l2.index_of("L(4,4)").unwrap()], 0.169);
        assert_eq!(flat[l2.index_of("alpha[d2,d1].S3").unwrap()], -0.140);
        let (spec3, _) = scenario3_coarse();
        assert_eq!(ParamLayout::new(&spec3).unwrap().n_params(), 30);
    }

    #[test]
    fn scenario_file_by_parameter_name() {
        let s = scenario2();
        let names = ParamLayout::new(&s.fit_spec).unwrap().names();
        let truth = s.fit_truth.clone().unwrap();
        let mut file = ScenarioFile {
            name: "x".into(),
            spec: s.fit_spec.clone(),
            parameters: names.iter().cloned().zip(truth.iter().copied()).collect(),
            covariates: s.truth.covariates.clone(),
            obs_times: None,
        };
        let text = serde_json::to_string(&file).unwrap();
        let back = ScenarioFile::from_json(&text).unwrap().into_scenario().unwrap();
        assert_eq!(back.fit_truth.unwrap(), truth);
        assert_eq!(back.truth.obs_times, s.truth.obs_times);
        file.parameters.remove(&names[0]);
        assert!(file.clone().into_scenario().unwrap_err().to_string().contains(&names[0]));
        file.parameters.insert("nope".into(), 1.0);
        assert!(file.into_scenario().is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let s = scenario2();
        let a = generate(&s.truth, 20, &mut replicate_rng(7, 0)).unwrap();
        let b = generate(&s.truth, 20, &mut replicate_rng(7, 0)).unwrap();
        let c = generate(&s.truth, 20, &mut replicate_rng(7, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.subjects[0].visits.len(), 7);
    }

    #[test]
    fn noiseless_markers_are_affine_images_of_the_latent_path() {
        let mut s = scenario2();
        s.truth.theta.sigma = vec![0.0, 0.0];
        s.truth.b = DMatrix::zeros(4, 4);
        let data = generate(&s.truth, 6, &mut replicate_rng(1, 0)).unwrap();
        let layout = ParamLayout::new(&s.truth.spec).unwrap();
        for subj in &data.subjects {
            let design = build_design(&layout.structure, 1.0, &subj.covariates, 6).unwrap();
            let mu = latent_mean(&design, &s.truth.theta, &layout).unwrap();
            for (j, v) in subj.visits.iter().enumerate() {
                for k in 0..2 {
                    let eta = &s.truth.theta.eta[k];
                    let y = v.values[k].unwrap();
                    assert!((y - (eta[0] + eta[1] * mu[j][k])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn baseline_moments_match_closed_form() {
        let s = scenario2();
        let n = 100_000;
        let data = generate(&s.truth, n, &mut replicate_rng(11, 0)).unwrap();
        let y: Vec<f64> = data.subjects.iter().map(|s| s.visits[0].values[0].unwrap()).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (b, p, e0, e1, sig) = (-1.635, 0.37, 3.878, 2.678, 0.376);
        let m_true = e0 + e1 * b * p;
        let v_true = e1 * e1 * (b * b * p * (1.0 - p) + 1.0 + sig * sig);
        assert!((mean - m_true).abs() < 4.0 * (v_true / n as f64).sqrt(), "{mean} vs {m_true}");
        // sd of the sample variance ~ v sqrt(2/n) for near-normal data, widen for the mixture
        assert!((var - v_true).abs() < 6.0 * v_true * (2.0 / n as f64).sqrt(), "{var} vs {v_true}");
    }

    #[test]
    fn generated_latent_moments_match_structural_forms() {
        // transformed markers with sigma = 0 are the latent path itself
        let mut s = scenario1();
        s.truth.theta.sigma = vec![0.0, 0.0];
        s.truth.theta.eta = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        s.truth.covariates.insert("C1".into(), CovariateDist::Normal { mean: 0.3, sd: 0.0 });
        s.truth.covariates.insert("C2".into(), CovariateDist::Bernoulli { p: 1.0 });
        let n = 200_000;
        let data = generate(&s.truth, n, &mut replicate_rng(3, 0)).unwrap();
        let layout = ParamLayout::new(&s.truth.spec).unwrap();
        let mut cov = BTreeMap::new();
        cov.insert("C1".to_string(), 0.3);
        cov.insert("C2".to_string(), 1.0);
        let design = build_design(&layout.structure, 1.0, &cov, 6).unwrap();
        let mu = latent_mean(&design, &s.truth.theta, &layout).unwrap();
        let v = latent_covariance(&design, &s.truth.theta, &layout).unwrap();
        let dim = 14;
        let mut mean = DVector::zeros(dim);
        let rows: Vec<DVector<f64>> = data
            .subjects
            .iter()
            .map(|s| DVector::from_iterator(dim, s.visits.iter().flat_map(|v| v.values.iter().map(|x| x.unwrap()))))
            .collect();
        for r in &rows {
            mean += r;
        }
        mean /= n as f64;
        let mut emp = DMatrix::zeros(dim, dim);
        for r in &rows {
            let d = r - &mean;
            emp += &d * d.transpose();
        }
        emp /= (n - 1) as f64;
        for j in 0..7 {
            for d in 0..2 {
                let se = (v[(2 * j + d, 2 * j + d)] / n as f64).sqrt();
                assert!((mean[2 * j + d] - mu[j][d]).abs() < 5.0 * se);
            }
        }
        let rel = (&emp - &v).norm() / v.norm();
        assert!(rel < 0.02, "relative Frobenius error {rel}");
    }

    #[test]
    fn missingness_rates_and_edge_cases() {
        let s = scenario2();
        let data = generate(&s.truth, 300, &mut replicate_rng(5, 0)).unwrap();
        let same = apply_missingness(&data, 0.0, 0.0, &mut replicate_rng(1, 0)).unwrap();
        assert_eq!(same, data);
        let base = apply_missingness(&data, 1.0, 0.0, &mut replicate_rng(1, 0)).unwrap();
        assert!(base.subjects.iter().all(|s| s.visits.len() == 1 && s.visits[0].time == 0.0));
        assert!(apply_missingness(&data, 1.5, 0.0, &mut replicate_rng(1, 0)).is_err());

        let big = generate(&s.truth, 20_000, &mut replicate_rng(5, 1)).unwrap();
        let m = apply_missingness(&big, 0.15, 0.07, &mut replicate_rng(2, 0)).unwrap();
        let candidates: f64 = 20_000.0 * 6.0;
        let kept = m.subjects.iter().map(|s| s.visits.len() - 1).sum::<usize>() as f64;
        let observed_markers = m.subjects.iter().flat_map(|s| &s.visits[1..]).flat_map(|v| &v.values).filter(|x| x.is_some()).count() as f64;
        // visits whose both markers were dropped disappear as well
        let p_gone: f64 = 0.15 + 0.85 * 0.07 * 0.07;
        let se = (p_gone * (1.0 - p_gone) / candidates).sqrt();
        assert!(((1.0 - kept / candidates) - p_gone).abs() < 3.0 * se);
        let p_obs: f64 = 0.85 * 0.93;
        let se = (p_obs * (1.0 - p_obs) / (2.0 * candidates)).sqrt();
        assert!((observed_markers / (2.0 * candidates) - p_obs).abs() < 3.0 * se);
    }

    #[test]
    fn scenario3_fine_generation_observes_every_unit() {
        let s = scenario3(Some((0, 2)), 0.5).unwrap();
        assert_eq!(s.truth.theta.alpha[2], 0.0);
        let data = generate(&s.truth, 3, &mut replicate_rng(1, 0)).unwrap();
        assert_eq!(data.subjects[0].visits.len(), 7);
        let p = Problem::new(&s.fit_spec, &data).unwrap();
        let grid: Vec<usize> = p.subjects()[0].occasions.iter().map(|o| o.grid_index).collect();
        assert_eq!(grid, vec![0, 2, 4, 6, 8, 10, 12]);
        assert!(scenario3(Some((1, 1)), 0.5).is_err());
    }
}

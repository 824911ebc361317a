//! Replicated simulation studies: coverage/bias and type-I error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Problem;
use crate::optimizer::{fit, wald_p, FitConfig};
use crate::params::ParamLayout;
use crate::prediction::finish;

use super::{apply_missingness, generate, replicate_rng, scenario3, Scenario};

/// MCAR missingness probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Missingness {
    pub p_visit: f64,
    pub p_marker: f64,
}

impl Missingness {
    /// The probabilities of the simulation design: 15% missed visits, 7%
    /// missing markers.
    pub const DESIGN: Missingness = Missingness { p_visit: 0.15, p_marker: 0.07 };
}

/// Result of one replicate's fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub converged: bool,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub iterations: usize,
}

/// One row of a coverage report, mirroring the columns
/// `theta, mean estimate, relative bias, ESE, ASE, CR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parameter: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    /// `100 * |mean - true| / |true|`.
    pub rel_bias_pct: f64,
    /// Empirical standard deviation of the estimates.
    pub ese: f64,
    /// Mean asymptotic standard error.
    pub ase: f64,
    pub coverage_pct: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub n_subjects: usize,
    pub missingness: Option<Missingness>,
    pub seed: u64,
    pub attempted: usize,
    pub converged: usize,
    pub rows: Vec<ParamSummary>,
}

impl CoverageReport {
    pub fn convergence_rate_pct(&self) -> f64 {
        100.0 * self.converged as f64 / self.attempted.max(1) as f64
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "true", "mean_estimate", "rel_bias_pct", "ese", "ase", "cr_pct", "n"])?;
        for r in &self.rows {
            w.write_record([
                r.parameter.clone(),
                r.true_value.to_string(),
                r.mean_estimate.to_string(),
                r.rel_bias_pct.to_string(),
                r.ese.to_string(),
                r.ase.to_string(),
                r.coverage_pct.to_string(),
                r.n.to_string(),
            ])?;
        }
        finish(w)
    }
}

/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959_963_984_540_054;

/// Aggregate converged replicates (in index order).
pub fn summarize(names: &[String], truth: &[f64], outcomes: &[ReplicateOutcome]) -> Vec<ParamSummary> {
    let used: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.converged).collect();
    let n = used.len();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let t = truth[i];
            let est: Vec<f64> = used.iter().map(|o| o.estimate[i]).collect();
            let mean = est.iter().sum::<f64>() / n.max(1) as f64;
            let ese = if n > 1 {
                (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            let ase = used.iter().map(|o| o.se[i]).sum::<f64>() / n.max(1) as f64;
            let covered =
                used.iter().filter(|o| (o.estimate[i] - t).abs() <= Z975 * o.se[i]).count();
            ParamSummary {
                parameter: name.clone(),
                true_value: t,
                mean_estimate: mean,
                rel_bias_pct: if t != 0.0 { 100.0 * (mean - t).abs() / t.abs() } else { f64::NAN },
                ese,
                ase,
                coverage_pct: if n > 0 { 100.0 * covered as f64 / n as f64 } else { f64::NAN },
                n,
            }
        })
        .collect()
}

/// Generate, optionally thin, and fit one replicate.
pub fn run_replicate(
    scenario: &Scenario,
    n_subjects: usize,
    missingness: Option<Missingness>,
    seed: u64,
    index: usize,
    config: &FitConfig,
) -> Result<(Problem, ReplicateOutcome)> {
    let mut rng = replicate_rng(seed, index as u64);
    let mut data = generate(&scenario.truth, n_subjects, &mut rng)?;
    if let Some(m) = missingness {
        data = apply_missingness(&data, m.p_visit, m.p_marker, &mut rng)?;
    }
    let problem = Problem::new(&scenario.fit_spec, &data)?;
    let outcome = match fit(&problem, config) {
        Ok(f) => ReplicateOutcome {
            index,
            converged: f.converged && f.se.iter().all(|s| s.is_finite()),
            estimate: f.theta_hat,
            se: f.se,
            iterations: f.iterations,
        },
        Err(_) => ReplicateOutcome {
            index,
            converged: false,
            estimate: vec![f64::NAN; problem.n_params()],
            se: vec![f64::NAN; problem.n_params()],
            iterations: 0,
        },
    };
    Ok((problem, outcome))
}

/// Coverage, bias and standard-error study of a well-specified scenario.
/// Replicates run in parallel; replicate `i` uses stream `i` of `seed`.
pub fn run_coverage_study(
    scenario: &Scenario,
    n_subjects: usize,
    replicates: usize,
    missingness: Option<Missingness>,
    seed: u64,
    config: &FitConfig,
) -> Result<CoverageReport> {
    let truth = scenario
        .fit_truth
        .clone()
        .ok_or_else(|| Error::spec(format!("scenario {} has no generating values on the fitted scale", scenario.name)))?;
    let names = ParamLayout::new(&scenario.fit_spec)?.names();
    let outcomes: Vec<ReplicateOutcome> = (0..replicates)
        .into_par_iter()
        .map(|i| run_replicate(scenario, n_subjects, missingness, seed, i, config).map(|r| r.1))
        .collect::<Result<_>>()?;
    let converged = outcomes.iter().filter(|o| o.converged).count();
    Ok(CoverageReport {
        scenario: scenario.name.clone(),
        n_subjects,
        missingness,
        seed,
        attempted: replicates,
        converged,
        rows: summarize(&names, &truth, &outcomes),
    })
}

/// Study definition read from JSON, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudyConfig {
    Coverage {
        /// Built-in scenario name (`s1`, `s2`).
        scenario: String,
        n_subjects: usize,
        replicates: usize,
        seed: u64,
        #[serde(default)]
        missingness: Option<Missingness>,
    },
    Type1 {
        n_subjects: usize,
        replicates: usize,
        seed: u64,
        /// Fitted steps.
        deltas: Vec<f64>,
        /// Null entries `(d, d2)`; every off-diagonal entry when absent.
        #[serde(default)]
        arms: Option<Vec<(usize, usize)>>,
        #[serde(default = "default_level")]
        level: f64,
    },
}

fn default_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StudyReport {
    Coverage(CoverageReport),
    Type1(TypeOneReport),
}

impl StudyReport {
    pub fn to_csv(&self) -> Result<String> {
        match self {
            StudyReport::Coverage(r) => r.to_csv(),
            StudyReport::Type1(r) => r.to_csv(),
        }
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn set_replicates(&mut self, r: usize) {
        match self {
            StudyConfig::Coverage { replicates, .. } | StudyConfig::Type1 { replicates, .. } => *replicates = r,
        }
    }

    pub fn set_seed(&mut self, s: u64) {
        match self {
            StudyConfig::Coverage { seed, .. } | StudyConfig::Type1 { seed, .. } => *seed = s,
        }
    }

    pub fn run(&self, config: &FitConfig) -> Result<StudyReport> {
        match self {
            StudyConfig::Coverage { scenario, n_subjects, replicates, seed, missingness } => {
                let sc = super::scenario_by_name(scenario)?;
                Ok(StudyReport::Coverage(run_coverage_study(&sc, *n_subjects, *replicates, *missingness, *seed, config)?))
            }
            StudyConfig::Type1 { n_subjects, replicates, seed, deltas, arms, level } => {
                let arms = arms.clone().unwrap_or_else(|| off_diagonal(3));
                Ok(StudyReport::Type1(run_type1_study(&arms, deltas, *n_subjects, *replicates, *seed, *level, config)?))
            }
        }
    }
}

/// Rejections of one null influence entry at one fitted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub parameter: String,
    pub delta: f64,
    pub rejected: usize,
    pub n: usize,
    pub attempted: usize,
    pub rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeOneReport {
    pub n_subjects: usize,
    pub seed: u64,
    pub level: f64,
    pub rows: Vec<RejectionRow>,
}

impl TypeOneReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["parameter", "delta", "rejected", "n", "attempted", "rate_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.parameter.clone(),
                r.delta.to_string(),
                r.rejected.to_string(),
                r.n.to_string(),
                r.attempted.to_string(),
                r.rate_pct.to_string(),
            ])?;
        }
        finish(w)
    }
}

/// Percentage of p-values (NaN = excluded) below `level`.
pub fn rejection_rate(p_values: &[f64], level: f64) -> (usize, usize, f64) {
    let used: Vec<f64> = p_values.iter().copied().filter(|p| p.is_finite()).collect();
    let rejected = used.iter().filter(|&&p| p < level).count();
    let rate = if used.is_empty() { f64::NAN } else { 100.0 * rejected as f64 / used.len() as f64 };
    (rejected, used.len(), rate)
}

/// All off-diagonal entries of a `D x D` influence matrix.
pub fn off_diagonal(n_dims: usize) -> Vec<(usize, usize)> {
    (0..n_dims).flat_map(|d| (0..n_dims).filter(move |&e| e != d).map(move |e| (d, e))).collect()
}

/// Type-I error of the Wald test for each off-diagonal influence of the
/// three-process system: the entry is zero in the near-continuous generating
/// model, data are fitted at each step in `deltas`.
pub fn run_type1_study(
    arms: &[(usize, usize)],
    deltas: &[f64],
    n_subjects: usize,
    replicates: usize,
    seed: u64,
    level: f64,
    config: &FitConfig,
) -> Result<TypeOneReport> {
    let mut rows = Vec::new();
    for (a, &(d, d2)) in arms.iter().enumerate() {
        for &delta in deltas {
            let scenario = scenario3(Some((d, d2)), delta)?;
            let layout = ParamLayout::new(&scenario.fit_spec)?;
            let name = format!(
                "alpha[{},{}].intercept",
                scenario.fit_spec.dimensions[d], scenario.fit_spec.dimensions[d2]
            );
            let idx = layout.index_of(&name).ok_or_else(|| Error::spec(format!("no parameter {name}")))?;
            // each arm draws its own datasets; within an arm the same
            // datasets are fitted at every step
            let arm_seed = seed.wrapping_add(a as u64);
            let p: Vec<f64> = (0..replicates)
                .into_par_iter()
                .map(|i| {
                    run_replicate(&scenario, n_subjects, None, arm_seed, i, config).map(|(_, o)| {
                        if o.converged {
                            wald_p(o.estimate[idx], o.se[idx])
                        } else {
                            f64::NAN
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let (rejected, n, rate_pct) = rejection_rate(&p, level);
            rows.push(RejectionRow { parameter: name, delta, rejected, n, attempted: replicates, rate_pct });
        }
    }
    Ok(TypeOneReport { n_subjects, seed, level, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario2;
    use rand::Rng;

    #[test]
    fn injected_truth_gives_zero_bias_full_coverage() {
        let names = vec!["a".to_string(), "b".to_string()];
        let truth = [0.5, -2.0];
        let outcomes: Vec<ReplicateOutcome> = (0..10)
            .map(|i| ReplicateOutcome { index: i, converged: true, estimate: truth.to_vec(), se: vec![0.1, 0.2], iterations: 1 })
            .collect();
        let rows = summarize(&names, &truth, &outcomes);
        for r in rows {
            assert_eq!(r.rel_bias_pct, 0.0);
            assert_eq!(r.coverage_pct, 100.0);
            assert_eq!(r.ese, 0.0);
            assert_eq!(r.n, 10);
        }
    }

    #[test]
    fn non_converged_replicates_are_excluded_but_counted() {
        let names = vec!["a".to_string()];
        let mut outcomes: Vec<ReplicateOutcome> = (0..4)
            .map(|i| ReplicateOutcome { index: i, converged: true, estimate: vec![1.0 + i as f64], se: vec![1.0], iterations: 1 })
            .collect();
        outcomes[3].converged = false;
        let rows = summarize(&names, &[2.0], &outcomes);
        assert_eq!(rows[0].n, 3);
        assert_eq!(rows[0].mean_estimate, 2.0);
    }

    #[test]
    fn config_parses_both_kinds() {
        let c = StudyConfig::from_json(
            r#"{"kind":"coverage","scenario":"s2","n_subjects":512,"replicates":100,"seed":1,
                "missingness":{"p_visit":0.15,"p_marker":0.07}}"#,
        )
        .unwrap();
        assert!(matches!(c, StudyConfig::Coverage { missingness: Some(_), .. }));
        let mut t = StudyConfig::from_json(r#"{"kind":"type1","n_subjects":300,"replicates":200,"seed":2,"deltas":[0.5]}"#).unwrap();
        t.set_replicates(5);
        assert!(matches!(t, StudyConfig::Type1 { replicates: 5, level, arms: None, .. } if level == 0.05));
        assert!(StudyConfig::from_json(r#"{"kind":"other"}"#).is_err());
    }

    #[test]
    fn uniform_p_values_reject_at_nominal_rate() {
        let mut rng = replicate_rng(42, 0);
        let p: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
        let (_, n, rate) = rejection_rate(&p, 0.05);
        assert_eq!(n, 20_000);
        // binomial sd of the rate is ~0.15 points
        assert!((rate - 5.0).abs() < 0.5, "{rate}");
        assert_eq!(rejection_rate(&[f64::NAN, 0.01], 0.05), (1, 1, 100.0));
    }

    #[test]
    fn small_coverage_study_is_reproducible() {
        let s = scenario2();
        let cfg = FitConfig { max_iters: 60, ..FitConfig::default() };
        let a = run_coverage_study(&s, 60, 2, Some(Missingness::DESIGN), 3, &cfg).unwrap();
        let b = run_coverage_study(&s, 60, 2, Some(Missingness::DESIGN), 3, &cfg).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.attempted, 2);
        assert!(a.rows.iter().all(|r| r.coverage_pct.is_nan() || (0.0..=100.0).contains(&r.coverage_pct)));
        assert_eq!(off_diagonal(3).len(), 6);
    }
}

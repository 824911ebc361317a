//! Latent-process BLUP, marker predictions, binned goodness of fit and
//! k-fold cross-validation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{cholesky_jitter, Problem};
use crate::optimizer::{fit, FitConfig};
use crate::params::Theta;
use crate::spec::ModelSpec;
use crate::structural::{latent_paths, LatentPaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Marginal,
    SubjectSpecific,
}

/// Random effects of one subject given its observations.
#[derive(Debug, Clone)]
pub struct Conditional {
    pub paths: LatentPaths,
    /// Prior covariance of the random effects.
    pub b: DMatrix<f64>,
    /// `E[w | y]`.
    pub w_hat: DVector<f64>,
    /// `Var[w | y]`.
    pub w_cov: DMatrix<f64>,
}

/// Condition the random effects of subject `i` on its transformed markers.
pub fn conditional(problem: &Problem, theta: &Theta, i: usize) -> Result<Conditional> {
    let layout = problem.layout();
    let paths = latent_paths(problem.design(i), theta, layout)?;
    let b = layout.assemble_b(&theta.l_free);
    let m = problem.subject_moments(theta, i)?;
    let marker_dim = &layout.structure.marker_dim;
    let nr = b.nrows();
    let a = DMatrix::from_fn(m.cells.len(), nr, |r, c| {
        let (g, k) = m.cells[r];
        paths.loading[g][(marker_dim[k], c)]
    });
    let chol = cholesky_jitter(&m.v)?;
    let ab = &a * &b;
    let w_hat = ab.transpose() * chol.solve(&(&m.ytilde - &m.mu));
    let mut w_cov = &b - ab.transpose() * chol.solve(&ab);
    w_cov = (&w_cov + w_cov.transpose()) * 0.5;
    Ok(Conditional { paths, b, w_hat, w_cov })
}

/// BLUP of the latent processes over grid occasions `0..=J`:
/// `mu_j + loading_j E[w | y]`.
pub fn blup_latent(problem: &Problem, theta: &Theta, i: usize) -> Result<Vec<DVector<f64>>> {
    let c = conditional(problem, theta, i)?;
    Ok(c.paths.mean.iter().zip(&c.paths.loading).map(|(m, l)| m + l * &c.w_hat).collect())
}

/// Transformed-scale prediction of one marker at one occasion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction {
    pub grid_index: usize,
    pub marker: usize,
    pub mean: f64,
    /// Predictive variance including measurement error.
    pub variance: f64,
}

fn cell_predictions(problem: &Problem, theta: &Theta, i: usize, c: &Conditional, mode: Mode) -> Vec<CellPrediction> {
    let marker_dim = &problem.layout().structure.marker_dim;
    let (w, cov) = match mode {
        Mode::Marginal => (DVector::zeros(c.b.nrows()), &c.b),
        Mode::SubjectSpecific => (c.w_hat.clone(), &c.w_cov),
    };
    let mut out = Vec::new();
    for occ in &problem.subjects()[i].occasions {
        let g = occ.grid_index;
        for (k, &d) in marker_dim.iter().enumerate() {
            let row = c.paths.loading[g].row(d);
            let mean = c.paths.mean[g][d] + (row * &w)[0];
            let variance = (row * cov * row.transpose())[0].max(0.0) + theta.sigma[k] * theta.sigma[k];
            out.push(CellPrediction { grid_index: g, marker: k, mean, variance });
        }
    }
    out
}

/// Predictions of every marker at every occasion of subject `i`.
pub fn predict_transformed(problem: &Problem, theta: &Theta, i: usize, mode: Mode) -> Result<Vec<CellPrediction>> {
    let c = conditional(problem, theta, i)?;
    Ok(cell_predictions(problem, theta, i, &c, mode))
}

/// Monte-Carlo natural-scale prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaturalPrediction {
    pub grid_index: usize,
    pub marker: usize,
    pub mean: f64,
    /// Monte-Carlo standard error of `mean`.
    pub mc_se: f64,
    pub clamped: usize,
}

/// RNG for the draws of subject `i`.
pub fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn natural_from(
    problem: &Problem,
    theta: &Theta,
    cells: &[CellPrediction],
    ndraws: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NaturalPrediction>> {
    if ndraws < 2 {
        return Err(Error::InvalidParameter("at least two Monte-Carlo draws are needed".into()));
    }
    let links = problem.links();
    let names = &problem.spec().markers;
    cells
        .iter()
        .map(|c| {
            let sd = c.variance.sqrt();
            let (mut sum, mut sum2, mut clamped) = (0.0, 0.0, 0);
            for _ in 0..ndraws {
                let z: f64 = rng.sample(StandardNormal);
                let y = links[c.marker].inverse(&theta.eta[c.marker], c.mean + sd * z, &names[c.marker].name)?;
                clamped += y.clamped as usize;
                sum += y.value;
                sum2 += y.value * y.value;
            }
            let n = ndraws as f64;
            let mean = sum / n;
            let var = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0);
            Ok(NaturalPrediction { grid_index: c.grid_index, marker: c.marker, mean, mc_se: (var / n).sqrt(), clamped })
        })
        .collect()
}

/// Natural-scale predictions: transformed outcomes drawn from the marginal
/// or conditional Gaussian, mapped through the inverse links and averaged.
pub fn predict_natural(
    problem: &Problem,
    theta: &Theta,
    i: usize,
    mode: Mode,
    ndraws: usize,
    seed: u64,
) -> Result<Vec<NaturalPrediction>> {
    let cells = predict_transformed(problem, theta, i, mode)?;
    natural_from(problem, theta, &cells, ndraws, &mut subject_rng(seed, i))
}

/// One subject-occasion-marker row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject: String,
    pub time: f64,
    pub grid_index: usize,
    pub marker: String,
    pub observed: Option<f64>,
    pub observed_transformed: Option<f64>,
    pub marginal: f64,
    pub subject_specific: f64,
    pub marginal_natural: Option<f64>,
    pub subject_specific_natural: Option<f64>,
    /// Cross-validation fold the subject was held out in.
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub rows: Vec<PredictionRow>,
    /// Monte-Carlo draws behind the natural-scale columns.
    pub ndraws: Option<usize>,
}

impl PredictionSet {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "subject_id",
            "time",
            "grid_index",
            "marker",
            "observed",
            "observed_transformed",
            "marginal",
            "subject_specific",
            "marginal_natural",
            "subject_specific_natural",
            "fold",
            "ndraws",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let draws = self.ndraws.map(|n| n.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.subject.clone(),
                r.time.to_string(),
                r.grid_index.to_string(),
                r.marker.clone(),
                opt(r.observed),
                opt(r.observed_transformed),
                r.marginal.to_string(),
                r.subject_specific.to_string(),
                opt(r.marginal_natural),
                opt(r.subject_specific_natural),
                r.fold.map(|f| f.to_string()).unwrap_or_default(),
                draws.clone(),
            ])?;
        }
        finish(w)
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
}

/// Natural-scale draw settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draws {
    pub ndraws: usize,
    pub seed: u64,
}

impl Default for Draws {
    fn default() -> Self {
        Draws { ndraws: 1000, seed: 0 }
    }
}

fn subject_rows(problem: &Problem, theta: &Theta, i: usize, draws: Option<Draws>) -> Result<Vec<PredictionRow>> {
    let c = conditional(problem, theta, i)?;
    let marg = cell_predictions(problem, theta, i, &c, Mode::Marginal);
    let ss = cell_predictions(problem, theta, i, &c, Mode::SubjectSpecific);
    let (marg_nat, ss_nat) = match draws {
        Some(d) => {
            let mut rng = subject_rng(d.seed, i);
            (
                Some(natural_from(problem, theta, &marg, d.ndraws, &mut rng)?),
                Some(natural_from(problem, theta, &ss, d.ndraws, &mut rng)?),
            )
        }
        None => (None, None),
    };
    let subject = &problem.subjects()[i];
    let links = problem.links();
    let mut rows = Vec::with_capacity(marg.len());
    let nk = problem.spec().n_markers();
    for (r, (m, s)) in marg.iter().zip(&ss).enumerate() {
        let occ = &subject.occasions[r / nk];
        let observed = occ.values[m.marker];
        let observed_transformed = match observed {
            Some(y) => Some(links[m.marker].transform(&theta.eta[m.marker], y)?.value),
            None => None,
        };
        rows.push(PredictionRow {
            subject: subject.id.clone(),
            time: occ.time,
            grid_index: m.grid_index,
            marker: problem.spec().markers[m.marker].name.clone(),
            observed,
            observed_transformed,
            marginal: m.mean,
            subject_specific: s.mean,
            marginal_natural: marg_nat.as_ref().map(|v| v[r].mean),
            subject_specific_natural: ss_nat.as_ref().map(|v| v[r].mean),
            fold: None,
        });
    }
    Ok(rows)
}

/// Marginal and subject-specific predictions for every subject, optionally
/// with natural-scale Monte-Carlo predictions. Subject `i` draws from stream
/// `i` of the seed, so the output does not depend on the thread count.
pub fn predict_all(problem: &Problem, flat: &[f64], draws: Option<Draws>) -> Result<PredictionSet> {
    let theta = problem.layout().unpack(flat)?;
    let per: Vec<Vec<PredictionRow>> = (0..problem.n_subjects())
        .into_par_iter()
        .map(|i| subject_rows(problem, &theta, i, draws))
        .collect::<Result<_>>()?;
    Ok(PredictionSet { rows: per.into_iter().flatten().collect(), ndraws: draws.map(|d| d.ndraws) })
}

/// Which prediction column a goodness-of-fit table compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GofScale {
    Transformed,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofRow {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub marker: String,
    pub mean_observed: Option<f64>,
    pub mean_predicted: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
}

/// Bin edges every `interval` time units from 0 through `end`.
pub fn default_bin_edges(spec: &ModelSpec, interval: f64) -> Result<Vec<f64>> {
    if !(interval.is_finite() && interval > 0.0) {
        return Err(Error::InvalidParameter(format!("bin interval must be positive, got {interval}")));
    }
    let end = spec.delta * (spec.grid_len as f64 + 1.0);
    let n = (end / interval).ceil().max(1.0) as usize;
    Ok((0..=n).map(|i| i as f64 * interval).collect())
}

fn bin_of(edges: &[f64], t: f64) -> Option<usize> {
    let last = edges.len() - 2;
    if t < edges[0] || t > edges[last + 1] {
        return None;
    }
    // half-open bins, the last one closed
    Some(edges.partition_point(|&e| e <= t).saturating_sub(1).min(last))
}

/// Mean observed and mean predicted marker values per time bin with a
/// normal-approximation 95% interval for the observed mean. Subject-specific
/// predictions are compared; rows without an observation are skipped.
pub fn gof_binned(predictions: &PredictionSet, edges: &[f64], scale: GofScale) -> Result<Vec<GofRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("bin edges must be at least two increasing values".into()));
    }
    let mut markers: Vec<String> = Vec::new();
    for r in &predictions.rows {
        if !markers.contains(&r.marker) {
            markers.push(r.marker.clone());
        }
    }
    let nb = edges.len() - 1;
    let mut acc = vec![vec![(0usize, 0.0, 0.0, 0.0); nb]; markers.len()];
    for r in &predictions.rows {
        let (obs, pred) = match scale {
            GofScale::Transformed => (r.observed_transformed, Some(r.subject_specific)),
            GofScale::Natural => (r.observed, r.subject_specific_natural),
        };
        let (Some(obs), Some(pred)) = (obs, pred) else {
            if scale == GofScale::Natural && r.observed.is_some() {
                return Err(Error::data("natural-scale predictions were not computed"));
            }
            continue;
        };
        let Some(b) = bin_of(edges, r.time) else {
            return Err(Error::data(format!("time {} outside the bin edges", r.time)));
        };
        let k = markers.iter().position(|m| *m == r.marker).unwrap_or(0);
        let cell = &mut acc[k][b];
        cell.0 += 1;
        cell.1 += obs;
        cell.2 += obs * obs;
        cell.3 += pred;
    }
    let mut rows = Vec::with_capacity(nb * markers.len());
    for b in 0..nb {
        for (k, name) in markers.iter().enumerate() {
            let (n, s, s2, p) = acc[k][b];
            let mut row = GofRow {
                bin: b,
                lower: edges[b],
                upper: edges[b + 1],
                marker: name.clone(),
                mean_observed: None,
                mean_predicted: None,
                ci_lo: None,
                ci_hi: None,
                n,
            };
            if n > 0 {
                let nf = n as f64;
                let mean = s / nf;
                row.mean_observed = Some(mean);
                row.mean_predicted = Some(p / nf);
                if n > 1 {
                    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
                    let half = crate::sim::study::Z975 * (var / nf).sqrt();
                    row.ci_lo = Some(mean - half);
                    row.ci_hi = Some(mean + half);
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn gof_to_csv(rows: &[GofRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin", "lower", "upper", "marker", "mean_observed", "mean_predicted", "ci_lo", "ci_hi", "n"])?;
    for r in rows {
        w.write_record([
            r.bin.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.marker.clone(),
            opt(r.mean_observed),
            opt(r.mean_predicted),
            opt(r.ci_lo),
            opt(r.ci_hi),
            r.n.to_string(),
        ])?;
    }
    finish(w)
}

/// Plot-ready long format; `time_bin` is the bin midpoint.
pub fn gof_plot_csv(rows: &[GofRow], group: &str) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time_bin", "marker", "group", "observed_mean", "ci_lo", "ci_hi", "predicted_mean"])?;
    for r in rows.iter().filter(|r| r.n > 0) {
        w.write_record([
            (0.5 * (r.lower + r.upper)).to_string(),
            r.marker.clone(),
            group.to_string(),
            opt(r.mean_observed),
            opt(r.ci_lo),
            opt(r.ci_hi),
            opt(r.mean_predicted),
        ])?;
    }
    finish(w)
}

/// Fold of each subject (in dataset order): a seeded shuffle dealt into `k`
/// groups of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || n < k {
        return Err(Error::InvalidParameter(format!("need 2 <= k <= N, got k={k}, N={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldOutcome>,
    /// Out-of-fold predictions, concatenated in fold order.
    pub predictions: PredictionSet,
}

fn run_fold(
    data: &Dataset,
    spec: &ModelSpec,
    config: &FitConfig,
    assignment: &[usize],
    f: usize,
    draws: Option<Draws>,
) -> Result<(bool, usize, usize, PredictionSet)> {
    let train: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] != f).collect();
    let test: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == f).collect();
    let train_problem = Problem::new(spec, &data.select(&train))?;
    let result = fit(&train_problem, config)?;
    // the held-out subjects reuse the knots placed on the training data
    let fitted_spec = train_problem.spec().clone();
    let held = data.select(&test).bind(&fitted_spec)?;
    let test_problem = Problem::from_subjects(fitted_spec, held)?;
    let mut set = predict_all(&test_problem, &result.theta_hat, draws)?;
    for r in &mut set.rows {
        r.fold = Some(f);
    }
    Ok((result.converged, train.len(), test.len(), set))
}

/// k-fold cross-validated predictions; each fold is refitted from a staged
/// start. A failing fold is reported and contributes no predictions.
pub fn kfold_cv(
    data: &Dataset,
    k: usize,
    seed: u64,
    spec: &ModelSpec,
    config: &FitConfig,
    draws: Option<Draws>,
) -> Result<CvResult> {
    let assignment = fold_assignment(data.n_subjects(), k, seed)?;
    let outcomes: Vec<(FoldOutcome, Option<PredictionSet>)> = (0..k)
        .into_par_iter()
        .map(|f| {
            let n_test = assignment.iter().filter(|&&a| a == f).count();
            match run_fold(data, spec, config, &assignment, f, draws) {
                Ok((converged, n_train, n_test, set)) => {
                    (FoldOutcome { fold: f, n_train, n_test, converged, error: None }, Some(set))
                }
                Err(e) => (
                    FoldOutcome { fold: f, n_train: assignment.len() - n_test, n_test, converged: false, error: Some(e.to_string()) },
                    None,
                ),
            }
        })
        .collect();
    let mut folds = Vec::with_capacity(k);
    let mut rows = Vec::new();
    for (o, set) in outcomes {
        if let Some(s) = set {
            rows.extend(s.rows);
        }
        folds.push(o);
    }
    Ok(CvResult { folds, predictions: PredictionSet { rows, ndraws: draws.map(|d| d.ndraws) } })
}

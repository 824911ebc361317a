//! Marquardt-type maximization of the log-likelihood.
//!
//! Newton steps on the observed information `H = -d2 L` are used whenever `H`
//! is positive definite; otherwise the diagonal is inflated,
//! `H* = H + lambda * diag(|H_ii|)`, until it is. Each direction is searched
//! with step fractions `nu = 1, 1/2, 1/4, ...`. Convergence needs all three of
//! a small parameter change, a small likelihood change and a small relative
//! distance to the maximum `RDM = U' H^{-1} U / n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Occasion, SubjectData};
use crate::error::{Error, Result};
use crate::likelihood::Problem;
use crate::measurement::transform_cached;
use crate::numdiff;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub eps_theta: f64,
    pub eps_loglik: f64,
    pub eps_rdm: f64,
    pub max_iters: usize,
    /// First inflation tried when `H` is not positive definite.
    pub lambda_init: f64,
    /// Multiplier for raising (rejected step) and lowering (accepted step) lambda.
    pub lambda_factor: f64,
    /// Initial step fraction.
    pub nu_init: f64,
    /// Halvings of `nu` tried per inflation level.
    pub max_halvings: usize,
    /// Inflation raises tried before giving up on an iteration.
    pub max_inflations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            eps_theta: 1e-3,
            eps_loglik: 1e-3,
            eps_rdm: 1e-3,
            max_iters: 500,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            nu_init: 1.0,
            max_halvings: 6,
            max_inflations: 12,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eps_theta, self.eps_loglik, self.eps_rdm, self.lambda_init];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.lambda_factor > 1.0) {
            return Err(Error::InvalidParameter("fit thresholds must be positive".into()));
        }
        if !(self.nu_init > 0.0 && self.nu_init <= 1.0) {
            return Err(Error::InvalidParameter("nu_init must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Values of the three stopping criteria at the last iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    #[serde(with = "crate::io::nullable")]
    pub delta_theta: f64,
    #[serde(with = "crate::io::nullable")]
    pub delta_loglik: f64,
    #[serde(with = "crate::io::nullable")]
    pub rdm: f64,
    pub theta_ok: bool,
    pub loglik_ok: bool,
    pub rdm_ok: bool,
}

impl Convergence {
    pub fn converged(&self) -> bool {
        self.theta_ok && self.loglik_ok && self.rdm_ok
    }
}

/// Outcome of [`maximize`].
#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub convergence: Convergence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub convergence: Convergence,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Two-sided Wald p-value of `theta_i = 0`.
    pub fn wald_p(&self, i: usize) -> f64 {
        wald_p(self.theta_hat[i], self.se[i])
    }
}

pub fn wald_p(estimate: f64, se: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let z = estimate / se;
    if !z.is_finite() {
        return f64::NAN;
    }
    2.0 * Normal::standard().cdf(-z.abs())
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

/// Cholesky factor of a numerically positive definite matrix.
fn pd_cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let c = m.clone().cholesky()?;
    let l = c.l_dirty();
    let ok = (0..l.nrows()).all(|i| {
        let d = l[(i, i)];
        d.is_finite() && d * d > 1e-13 * scale
    });
    ok.then_some(c)
}

fn rdm(grad: &[f64], info: &DMatrix<f64>) -> f64 {
    let n = grad.len();
    let g = DVector::from_column_slice(grad);
    match pd_cholesky(info) {
        Some(c) => g.dot(&c.solve(&g)) / n as f64,
        None => f64::INFINITY,
    }
}

fn inflated(info: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut h = info.clone();
    for i in 0..h.nrows() {
        h[(i, i)] += lambda * info[(i, i)].abs().max(1e-12);
    }
    h
}

/// Maximize `f` from `x0`. Non-finite values of `f` count as rejected steps.
pub fn maximize<F>(f: &F, x0: &[f64], config: &FitConfig) -> Result<Maximum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::numerical("likelihood unbounded/undefined near start"));
    }
    let mut lambda: f64 = 0.0;
    let mut conv = Convergence {
        delta_theta: f64::INFINITY,
        delta_loglik: f64::INFINITY,
        rdm: f64::INFINITY,
        theta_ok: false,
        loglik_ok: false,
        rdm_ok: false,
    };
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let (grad, hess) = numdiff::gradient_hessian(f, &x, fx)?;
        let info = -hess;
        let r = rdm(&grad, &info);
        let g = DVector::from_column_slice(&grad);

        let mut accepted = None;
        let mut level = if pd_cholesky(&info).is_some() { lambda } else { lambda.max(config.lambda_init) };
        'search: for _ in 0..=config.max_inflations {
            let h = if level > 0.0 { inflated(&info, level) } else { info.clone() };
            let Some(chol) = pd_cholesky(&h) else {
                level = (level * config.lambda_factor).max(config.lambda_init);
                continue;
            };
            let dir = chol.solve(&g);
            let mut nu = config.nu_init;
            for _ in 0..=config.max_halvings {
                let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + nu * d).collect();
                let fc = f(&cand);
                if fc.is_finite() && fc >= fx {
                    accepted = Some((cand, fc));
                    break 'search;
                }
                nu *= 0.5;
            }
            level = (level * config.lambda_factor).max(config.lambda_init);
        }

        match accepted {
            Some((cand, fc)) => {
                let dt = x.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let dl = (fc - fx).abs();
                conv = Convergence {
                    delta_theta: dt,
                    delta_loglik: dl,
                    rdm: r,
                    theta_ok: dt < config.eps_theta,
                    loglik_ok: dl < config.eps_loglik,
                    rdm_ok: r < config.eps_rdm,
                };
                x = cand;
                fx = fc;
                lambda = if level > 0.0 { level / config.lambda_factor } else { 0.0 };
                if lambda < 1e-12 {
                    lambda = 0.0;
                }
                if conv.converged() {
                    break;
                }
            }
            None => {
                // no ascent direction found: we are at the maximum to numerical precision
                // or the curvature is unusable
                conv = Convergence {
                    delta_theta: 0.0,
                    delta_loglik: 0.0,
                    rdm: r,
                    theta_ok: true,
                    loglik_ok: true,
                    rdm_ok: r < config.eps_rdm,
                };
                break;
            }
        }
    }
    Ok(Maximum { x, value: fx, iterations, convergence: conv })
}

/// Standard errors `sqrt(diag(H^{-1}))` from the observed information `H`.
/// Returns warnings for a singular `H` (pseudo-inverse used) and for
/// negative variances (reported as NaN).
pub fn standard_errors(info: &DMatrix<f64>) -> (Vec<f64>, Vec<String>) {
    let n = info.nrows();
    let mut warnings = Vec::new();
    let sym = (info + info.transpose()) * 0.5;
    let inv = match pd_cholesky(&sym) {
        Some(c) => c.inverse(),
        None => {
            let svd = sym.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let tol = smax * n as f64 * f64::EPSILON * 1e3;
            let singular = svd.singular_values.iter().any(|&s| s <= tol);
            if singular {
                warnings.push("information matrix is singular; standard errors use its pseudo-inverse".into());
                svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN))
            } else {
                warnings.push("information matrix is not positive definite".into());
                sym.try_inverse().unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN))
            }
        }
    };
    let mut se = Vec::with_capacity(n);
    let mut negative = 0;
    for i in 0..n {
        let v = inv[(i, i)];
        if v >= 0.0 {
            se.push(v.sqrt());
        } else {
            negative += 1;
            se.push(f64::NAN);
        }
    }
    if negative > 0 {
        warnings.push(format!("{negative} negative variance(s) reported as NaN"));
    }
    (se, warnings)
}

/// Maximize the likelihood of `problem` from `theta0`.
pub fn lm_fit(problem: &Problem, theta0: &[f64], config: &FitConfig) -> Result<FitResult> {
    let f = |x: &[f64]| problem.loglik(x);
    let mut max = maximize(&f, theta0, config)?;
    // the likelihood does not see these signs; report one representative
    max.x = problem.layout().canonical(&max.x)?;
    let hess = problem.hessian(&max.x)?;
    let (se, mut warnings) = standard_errors(&(-hess));
    let converged = max.convergence.converged();
    if !converged {
        let c = &max.convergence;
        warnings.push(format!(
            "not converged after {} iterations (dtheta {:.3e}, dloglik {:.3e}, RDM {:.3e}; RDM is usually the binding criterion)",
            max.iterations, c.delta_theta, c.delta_loglik, c.rdm
        ));
    }
    if problem.n_clamped() > 0 {
        warnings.push(format!("{} observation(s) outside the spline link boundaries were clamped", problem.n_clamped()));
    }
    let n = problem.n_params();
    Ok(FitResult {
        names: problem.layout().names(),
        theta_hat: max.x,
        se,
        loglik: max.value,
        aic: aic(max.value, n),
        n_params: n,
        iterations: max.iterations,
        convergence: max.convergence,
        converged,
        warnings,
    })
}

/// Staged start followed by the joint fit.
pub fn fit(problem: &Problem, config: &FitConfig) -> Result<FitResult> {
    let theta0 = staged_init(problem, config)?;
    lm_fit(problem, &theta0, config)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Start that needs no fitting: zero regression and influence parameters,
/// small random-slope variances, links that standardize each marker and
/// `sigma_k` equal to the standard deviation of the transformed marker.
pub fn heuristic_start(problem: &Problem) -> Vec<f64> {
    let layout = problem.layout();
    let s = &layout.structure;
    let mut t = layout.zeros();
    for (p, &(i, j)) in layout.l_positions.iter().enumerate() {
        if i == j && i >= s.n_dims {
            t.l_free[p] = 0.1;
        }
    }
    for (k, link) in problem.links().iter().enumerate() {
        let values: Vec<f64> = (0..problem.n_subjects())
            .flat_map(|i| problem.observations(i).iter().filter(|o| o.marker == k).map(|o| o.value))
            .collect();
        let (m, sd) = if values.len() > 1 { mean_sd(&values) } else { (0.0, 1.0) };
        let sd = if sd > 0.0 { sd } else { 1.0 };
        t.eta[k] = match link.knots() {
            None => vec![m, sd],
            Some(knots) => {
                // identity written in the I-spline basis (Greville abscissae of
                // the cubic B-splines), then standardized
                let lo = knots[0];
                let hi = knots[knots.len() - 1];
                let mut full = vec![lo; 4];
                full.extend_from_slice(&knots[1..knots.len() - 1]);
                full.extend(std::iter::repeat_n(hi, 4));
                let nb = full.len() - 4;
                let grev: Vec<f64> = (0..nb).map(|i| (full[i + 1] + full[i + 2] + full[i + 3]) / 3.0).collect();
                let mut eta = vec![(grev[0] - m) / sd];
                eta.extend(grev.windows(2).map(|w| ((w[1] - w[0]) / sd).max(0.0).sqrt()));
                eta
            }
        };
        let tr: Vec<f64> = problem
            .subjects()
            .iter()
            .enumerate()
            .flat_map(|(i, _)| problem.observations(i).iter().filter(|o| o.marker == k))
            .map(|o| transform_cached(&t.eta[k], &o.basis))
            .collect();
        let sdt = if tr.len() > 1 { mean_sd(&tr).1 } else { 1.0 };
        t.sigma[k] = if sdt > 0.0 { sdt } else { 1.0 };
    }
    layout.pack(&t).expect("shapes from layout")
}

fn sub_subjects(subjects: &[SubjectData], markers: &[usize]) -> Vec<SubjectData> {
    subjects
        .iter()
        .filter_map(|s| {
            let occasions: Vec<Occasion> = s
                .occasions
                .iter()
                .filter_map(|o| {
                    let values: Vec<Option<f64>> = markers.iter().map(|&k| o.values[k]).collect();
                    values.iter().any(Option::is_some).then(|| Occasion { values, ..o.clone() })
                })
                .collect();
            (!occasions.is_empty()).then(|| SubjectData { occasions, ..s.clone() })
        })
        .collect()
}

/// Fit each dimension on its own, then assemble the joint start with all
/// cross-dimension parameters at zero. A failed univariate fit falls back to
/// the heuristic start for that dimension.
pub fn staged_init(problem: &Problem, config: &FitConfig) -> Result<Vec<f64>> {
    let spec = problem.spec();
    let layout = problem.layout();
    let s = &layout.structure;
    let heuristic = heuristic_start(problem);
    let mut joint = layout.unpack(&heuristic)?;
    if s.n_dims == 1 {
        return match lm_start(problem, config) {
            Some(x) => Ok(x),
            None => Ok(heuristic),
        };
    }
    for d in 0..s.n_dims {
        let (sub_spec, markers) = spec.sub_model(d)?;
        let subjects = sub_subjects(problem.subjects(), &markers);
        let Ok(sub) = Problem::from_subjects(sub_spec, subjects) else { continue };
        let Some(x) = lm_start(&sub, config) else { continue };
        let sl = sub.layout();
        let st = sl.unpack(&x)?;
        // names of regression, influence and measurement parameters agree
        for (info, v) in sl.params.iter().zip(&x) {
            if info.name.starts_with("L(") {
                continue;
            }
            let idx = layout
                .index_of(&info.name)
                .ok_or_else(|| Error::spec(format!("sub-model parameter {} missing from the joint model", info.name)))?;
            let mut flat = layout.pack(&joint)?;
            flat[idx] = *v;
            joint = layout.unpack(&flat)?;
        }
        // random-effect positions: 0 -> u_d, 1 + k -> v_d[k]
        let map = |i: usize| if i == 0 { d } else { s.random_offset(d) + i - 1 };
        for (p, &(i, j)) in sl.l_positions.iter().enumerate() {
            if let Some(q) = layout.l_index(map(i), map(j)) {
                joint.l_free[q] = st.l_free[p];
            }
        }
    }
    layout.pack(&joint)
}

fn lm_start(problem: &Problem, config: &FitConfig) -> Option<Vec<f64>> {
    let x0 = heuristic_start(problem);
    let f = |x: &[f64]| problem.loglik(x);
    maximize(&f, &x0, config).ok().map(|m| m.x)
}

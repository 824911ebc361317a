//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dynlatent::design::{build_design, DesignSet};
use dynlatent::params::{ParamKind, ParamLayout, Theta};
use dynlatent::spec::ModelSpec;
use dynlatent::structural::Dynamics;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

/// A random model with `D <= 3` processes and `J <= 12` grid steps, its
/// parameters and the design of one subject.
pub struct RandomModel {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub theta: Theta,
    pub design: DesignSet,
}

pub fn random_model<R: Rng>(rng: &mut R) -> RandomModel {
    let nd = rng.random_range(1..=3usize);
    let grid_len = rng.random_range(1..=12usize);
    let delta = [0.25, 0.5, 1.0][rng.random_range(0..3)];
    let span = delta * grid_len as f64;
    let names: Vec<String> = (1..=nd).map(|d| format!("p{d}")).collect();
    let markers: Vec<_> = (0..nd)
        .map(|d| json!({"name": format!("Y{}", d + 1), "dimension": d, "link": {"family": "linear"}}))
        .collect();

    let pick = |rng: &mut R, options: &[serde_json::Value]| -> Vec<serde_json::Value> {
        options.iter().filter(|_| rng.random_bool(0.5)).cloned().collect()
    };
    let baseline = pick(rng, &[json!("C1"), json!("C2")]);
    let mut trend = vec![json!("intercept")];
    trend.extend(pick(rng, &[json!("C1"), json!("time")]));
    let mut random = vec![json!("intercept")];
    random.extend(pick(rng, &[json!("time")]));
    let mut influence = vec![json!("intercept")];
    influence.extend(pick(
        rng,
        &[
            json!("C2"),
            json!({"time_bspline": {"degree": 2, "internal_knots": [span / 2.0], "lower": 0.0, "upper": span}}),
        ],
    ));
    let spec = ModelSpec::from_json(
        &json!({
            "dimensions": names,
            "markers": markers,
            "delta": delta,
            "grid_len": grid_len,
            "baseline_covariates": baseline,
            "trend_covariates": trend,
            "random_effects": random,
            "influence_regressors": influence,
            "correlated_baseline": rng.random_bool(0.5),
        })
        .to_string(),
    )
    .expect("random spec is valid");

    let layout = ParamLayout::new(&spec).unwrap();
    let flat: Vec<f64> = layout
        .params
        .iter()
        .map(|p| match p.kind {
            ParamKind::Alpha => rng.random_range(-0.3..0.3),
            ParamKind::Cholesky => rng.random_range(-0.8..0.8),
            ParamKind::Sigma => rng.random_range(0.2..1.0),
            _ => rng.random_range(-1.0..1.0),
        })
        .collect();
    let theta = layout.unpack(&flat).unwrap();
    let mut cov = BTreeMap::new();
    cov.insert("C1".to_string(), rng.random_range(-1.5..1.5));
    cov.insert("C2".to_string(), if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let design = build_design(&layout.structure, delta, &cov, grid_len).unwrap();
    RandomModel { spec, layout, theta, design }
}

/// Sample covariance of the stacked latent path over `draws` recursion runs
/// with `(u, v) ~ N(0, B)`.
pub fn mc_covariance<R: Rng>(m: &RandomModel, draws: usize, rng: &mut R) -> DMatrix<f64> {
    let nd = m.layout.structure.n_dims;
    let nr = m.layout.structure.n_random();
    let l = m.layout.assemble_l(&m.theta.l_free);
    let dynamics = Dynamics::new(&m.design, &m.theta, &m.layout).unwrap();
    let dim = nd * (dynamics.horizon() + 1);

    let chunk = 2000;
    let mut sum = DVector::<f64>::zeros(dim);
    let mut cross = DMatrix::<f64>::zeros(dim, dim);
    let mut done = 0;
    while done < draws {
        let k = chunk.min(draws - done);
        let mut x = DMatrix::<f64>::zeros(dim, k);
        for c in 0..k {
            let z = DVector::from_fn(nr, |_, _| StandardNormal.sample(rng));
            let w = &l * z;
            let (u, v) = w.as_slice().split_at(nd);
            dynamics.run(u, v, |j, state| {
                for (d, s) in state.iter().enumerate() {
                    x[(j * nd + d, c)] = *s;
                }
            });
        }
        sum += x.column_sum();
        cross.gemm(1.0, &x, &x.transpose(), 1.0);
        done += k;
    }
    let n = draws as f64;
    let mean = sum / n;
    (cross - &mean * mean.transpose() * n) / (n - 1.0)
}

pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

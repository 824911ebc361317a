//! Per-subject design matrices on the discretization grid.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spec::{Structure, Term};

/// Design of one subject over grid occasions `0..=horizon`.
///
/// Row `d` of `x` and `z` only carries dimension-`d` regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    pub x0: DMatrix<f64>,
    pub x: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub r: Vec<Vec<f64>>,
    pub delta: f64,
}

impl DesignSet {
    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }
}

fn eval_terms(terms: &[Term], t: f64, cov: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    terms
        .iter()
        .map(|term| {
            let v = term.eval(t, |n| cov.get(n).copied())?;
            if !v.is_finite() {
                return Err(Error::data(format!("regressor {} is not finite", term.name())));
            }
            Ok(v)
        })
        .collect()
}

fn block_row(blocks: &[Vec<Term>], t: f64, cov: &BTreeMap<String, f64>) -> Result<DMatrix<f64>> {
    let nd = blocks.len();
    let width: usize = blocks.iter().map(Vec::len).sum();
    let mut m = DMatrix::zeros(nd, width);
    let mut col = 0;
    for (d, terms) in blocks.iter().enumerate() {
        for (c, v) in eval_terms(terms, t, cov)?.into_iter().enumerate() {
            m[(d, col + c)] = v;
        }
        col += terms.len();
    }
    Ok(m)
}

/// Design matrices for grid occasions `0..=horizon` at times `j * delta`.
pub fn build_design(
    structure: &Structure,
    delta: f64,
    covariates: &BTreeMap<String, f64>,
    horizon: usize,
) -> Result<DesignSet> {
    let x0 = block_row(&structure.baseline, 0.0, covariates)?;
    let mut x = Vec::with_capacity(horizon + 1);
    let mut z = Vec::with_capacity(horizon + 1);
    let mut r = Vec::with_capacity(horizon + 1);
    for j in 0..=horizon {
        let t = j as f64 * delta;
        x.push(block_row(&structure.trend, t, covariates)?);
        z.push(block_row(&structure.random, t, covariates)?);
        r.push(eval_terms(&structure.influence, t, covariates)?);
    }
    Ok(DesignSet { x0, x, z, r, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::ModelSpec;

    fn spec(baseline: &str, trend: &str) -> ModelSpec {
        ModelSpec::from_json(&format!(
            r#"{{
            "dimensions": ["a", "b"],
            "markers": [
                {{"name": "Y1", "dimension": 0, "link": {{"family": "linear"}}}},
                {{"name": "Y2", "dimension": 1, "link": {{"family": "linear"}}}}
            ],
            "delta": 0.5, "grid_len": 4,
            "baseline_covariates": {baseline},
            "trend_covariates": {trend},
            "random_effects": ["intercept"],
            "influence_regressors": ["intercept"]
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn baseline_block_structure() {
        let s = spec(r#"["C1", "C2"]"#, r#"["intercept"]"#).structure().unwrap();
        let cov = BTreeMap::from([("C1".to_string(), 0.3), ("C2".to_string(), 1.0)]);
        let d = build_design(&s, 0.5, &cov, 4).unwrap();
        assert_eq!(d.x0, DMatrix::from_row_slice(2, 4, &[0.3, 1.0, 0.0, 0.0, 0.0, 0.0, 0.3, 1.0]));
    }

    #[test]
    fn intercept_only_trend_is_identity() {
        let s = spec(r#"["C1"]"#, r#"["intercept"]"#).structure().unwrap();
        let cov = BTreeMap::from([("C1".to_string(), 0.3)]);
        let d = build_design(&s, 0.5, &cov, 4).unwrap();
        assert_eq!(d.x.len(), 5);
        for x in &d.x {
            assert_eq!(*x, DMatrix::<f64>::identity(2, 2));
        }
    }

    #[test]
    fn time_regressor_follows_grid() {
        let s = spec(r#"[]"#, r#"["intercept", "time"]"#).structure().unwrap();
        let d = build_design(&s, 0.5, &BTreeMap::new(), 3).unwrap();
        assert_eq!(d.x[3][(0, 1)], 1.5);
        assert_eq!(d.x[3][(1, 3)], 1.5);
        assert_eq!(d.x[3][(0, 3)], 0.0);
    }

    #[test]
    fn unknown_covariate_is_named() {
        let s = spec(r#"["AGE"]"#, r#"["intercept"]"#).structure().unwrap();
        let err = build_design(&s, 0.5, &BTreeMap::new(), 2).unwrap_err();
        assert!(err.to_string().contains("covariate AGE not found"), "{err}");
    }
}

//! Declarative model description.
//!
//! A [`ModelSpec`] is read from JSON (see `spec.schema.json` at the repository
//! root) and validated once; everything downstream treats it as immutable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LinkSpec {
    /// `(y - eta0) / eta1`.
    Linear,
    /// `eta0 + sum_m eta_m^2 I_m(y)` with quadratic I-splines.
    Ispline {
        internal_knots: usize,
        /// Full knot vector `[lower, internal..., upper]`. Filled from marker
        /// quantiles when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knots: Option<Vec<f64>>,
    },
}

impl LinkSpec {
    /// Number of link parameters (`eta`) for this marker.
    pub fn n_params(&self) -> usize {
        match self {
            LinkSpec::Linear => 2,
            LinkSpec::Ispline { internal_knots, .. } => internal_knots + 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSpec {
    pub name: String,
    pub dimension: usize,
    pub link: LinkSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSplineSpec {
    #[serde(default = "default_spline_degree")]
    pub degree: usize,
    pub internal_knots: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

fn default_spline_degree() -> usize {
    2
}

/// One regressor as written in the JSON document: `"intercept"`, `"time"`,
/// a covariate name, or a B-spline basis in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegressorSpec {
    Name(String),
    TimeBSpline { time_bspline: TimeSplineSpec },
}

/// Regressor list shared by every dimension, or one list per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDimension {
    Shared(Vec<RegressorSpec>),
    Each(Vec<Vec<RegressorSpec>>),
}

impl Default for PerDimension {
    fn default() -> Self {
        PerDimension::Shared(Vec::new())
    }
}

impl PerDimension {
    fn for_dim(&self, d: usize) -> &[RegressorSpec] {
        match self {
            PerDimension::Shared(v) => v,
            PerDimension::Each(v) => v.get(d).map(|x| x.as_slice()).unwrap_or(&[]),
        }
    }

    fn check_len(&self, n_dims: usize, field: &str) -> Result<()> {
        if let PerDimension::Each(v) = self {
            if v.len() != n_dims {
                return Err(Error::spec(format!(
                    "{field} lists {} dimensions but the model has {n_dims}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Expanded regressor, ready for evaluation at a subject and time.
#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Intercept,
    Time,
    Covariate(String),
    /// Column `index` of a time B-spline basis (the first basis function is
    /// dropped so the intercept stays identifiable).
    TimeSpline { basis: BSplineBasis, index: usize },
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Intercept => "intercept".into(),
            Term::Time => "time".into(),
            Term::Covariate(c) => c.clone(),
            Term::TimeSpline { index, .. } => format!("S{index}"),
        }
    }

    /// Value at time `t`; `covariate` resolves covariate names.
    pub fn eval<F>(&self, t: f64, covariate: F) -> Result<f64>
    where
        F: Fn(&str) -> Option<f64>,
    {
        match self {
            Term::Intercept => Ok(1.0),
            Term::Time => Ok(t),
            Term::Covariate(name) => {
                covariate(name).ok_or_else(|| Error::spec(format!("covariate {name} not found")))
            }
            Term::TimeSpline { basis, index } => Ok(basis.eval(t).values[*index]),
        }
    }
}

fn expand(specs: &[RegressorSpec]) -> Result<Vec<Term>> {
    let mut out = Vec::new();
    for s in specs {
        match s {
            RegressorSpec::Name(n) => match n.as_str() {
                "intercept" | "1" => out.push(Term::Intercept),
                "time" => out.push(Term::Time),
                "" => return Err(Error::spec("empty regressor name")),
                other => out.push(Term::Covariate(other.to_string())),
            },
            RegressorSpec::TimeBSpline { time_bspline: ts } => {
                let basis =
                    BSplineBasis::clamped(ts.lower, ts.upper, &ts.internal_knots, ts.degree + 1)?;
                for index in 1..basis.len() {
                    out.push(Term::TimeSpline { basis: basis.clone(), index });
                }
            }
        }
    }
    Ok(out)
}

/// Structural status of one entry of the Cholesky factor of the random-effect
/// covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CholeskyEntry {
    Free,
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Names of the latent dimensions; `D` is their count.
    pub dimensions: Vec<String>,
    pub markers: Vec<MarkerSpec>,
    /// Discretization step.
    pub delta: f64,
    /// Number of grid steps `J`; occasions live on `0..=J`.
    pub grid_len: usize,
    /// Regressors of the initial level (no intercept allowed).
    #[serde(default)]
    pub baseline_covariates: PerDimension,
    /// Regressors of the rate of change.
    #[serde(default)]
    pub trend_covariates: PerDimension,
    /// Regressors carrying random effects on the rate of change.
    #[serde(default)]
    pub random_effects: PerDimension,
    /// Regressors of every temporal-influence coefficient, intercept first.
    pub influence_regressors: Vec<RegressorSpec>,
    /// When false, diagonal influence `a_dd` only uses the first regressor.
    #[serde(default)]
    pub influence_diag_time_varying: Option<Vec<bool>>,
    /// Correlate the random initial levels across dimensions.
    #[serde(default)]
    pub correlated_baseline: bool,
}

/// Validated, expanded view of a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Structure {
    pub n_dims: usize,
    pub n_markers: usize,
    pub baseline: Vec<Vec<Term>>,
    pub trend: Vec<Vec<Term>>,
    pub random: Vec<Vec<Term>>,
    pub influence: Vec<Term>,
    pub diag_full: Vec<bool>,
    pub marker_dim: Vec<usize>,
}

impl Structure {
    pub fn p0(&self) -> usize {
        self.baseline.iter().map(Vec::len).sum()
    }

    pub fn p(&self) -> usize {
        self.trend.iter().map(Vec::len).sum()
    }

    pub fn q(&self) -> usize {
        self.random.iter().map(Vec::len).sum()
    }

    pub fn r(&self) -> usize {
        self.influence.len()
    }

    /// Size of the random-effect vector `(u, v)`.
    pub fn n_random(&self) -> usize {
        self.n_dims + self.q()
    }

    pub fn baseline_offset(&self, d: usize) -> usize {
        self.baseline[..d].iter().map(Vec::len).sum()
    }

    pub fn trend_offset(&self, d: usize) -> usize {
        self.trend[..d].iter().map(Vec::len).sum()
    }

    /// Position of `v_d` inside the random-effect vector.
    pub fn random_offset(&self, d: usize) -> usize {
        self.n_dims + self.random[..d].iter().map(Vec::len).sum::<usize>()
    }

    /// Dimension owning position `i` of the random-effect vector.
    pub fn random_owner(&self, i: usize) -> usize {
        if i < self.n_dims {
            return i;
        }
        (0..self.n_dims)
            .rev()
            .find(|&d| i >= self.random_offset(d))
            .expect("index within random-effect vector")
    }

    /// Whether regressor `m` of influence coefficient `(d, d2)` is estimated.
    pub fn influence_active(&self, d: usize, d2: usize, m: usize) -> bool {
        d != d2 || m == 0 || self.diag_full[d]
    }

    pub fn cholesky_entry(&self, i: usize, j: usize, correlated_baseline: bool) -> CholeskyEntry {
        let nd = self.n_dims;
        if j > i {
            return CholeskyEntry::Zero;
        }
        if i < nd {
            return match (i == j, correlated_baseline) {
                (true, _) => CholeskyEntry::One,
                (false, true) => CholeskyEntry::Free,
                (false, false) => CholeskyEntry::Zero,
            };
        }
        let di = self.random_owner(i);
        if j < nd {
            return if j == di { CholeskyEntry::Free } else { CholeskyEntry::Zero };
        }
        if self.random_owner(j) == di {
            CholeskyEntry::Free
        } else {
            CholeskyEntry::Zero
        }
    }
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_dims(&self) -> usize {
        self.dimensions.len()
    }

    /// Same model on another step, with the grid rescaled to cover the same
    /// time span.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::spec(format!("delta must be positive, got {delta}")));
        }
        let mut out = self.clone();
        let span = self.delta * self.grid_len as f64;
        out.delta = delta;
        out.grid_len = (span / delta + 1e-9).floor() as usize;
        out.validate()?;
        Ok(out)
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.structure().map(|_| ())
    }

    /// Validate and expand the declarative description.
    pub fn structure(&self) -> Result<Structure> {
        let nd = self.n_dims();
        if nd == 0 {
            return Err(Error::spec("at least one latent dimension is required"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::spec(format!("delta must be positive, got {}", self.delta)));
        }
        if self.markers.len() < nd {
            return Err(Error::spec("need at least one marker per dimension"));
        }
        let mut names = BTreeSet::new();
        let mut per_dim = vec![0usize; nd];
        for m in &self.markers {
            if !names.insert(m.name.as_str()) {
                return Err(Error::spec(format!("duplicate marker name {}", m.name)));
            }
            if m.dimension >= nd {
                return Err(Error::spec(format!(
                    "marker {} refers to dimension {} but the model has {nd}",
                    m.name, m.dimension
                )));
            }
            per_dim[m.dimension] += 1;
            if let LinkSpec::Ispline { internal_knots, knots: Some(k) } = &m.link {
                if k.len() != internal_knots + 2 {
                    return Err(Error::spec(format!(
                        "marker {}: expected {} knots, got {}",
                        m.name,
                        internal_knots + 2,
                        k.len()
                    )));
                }
                if k.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::spec(format!("marker {}: knots must be strictly increasing", m.name)));
                }
            }
        }
        if let Some(d) = per_dim.iter().position(|&c| c == 0) {
            return Err(Error::spec(format!("dimension {} has no marker", self.dimensions[d])));
        }
        self.baseline_covariates.check_len(nd, "baseline_covariates")?;
        self.trend_covariates.check_len(nd, "trend_covariates")?;
        self.random_effects.check_len(nd, "random_effects")?;

        let baseline: Vec<Vec<Term>> =
            (0..nd).map(|d| expand(self.baseline_covariates.for_dim(d))).collect::<Result<_>>()?;
        for terms in &baseline {
            if terms.iter().any(|t| !matches!(t, Term::Covariate(_))) {
                return Err(Error::spec(
                    "baseline_covariates may only contain covariates (no intercept, time or splines)",
                ));
            }
        }
        let trend = (0..nd).map(|d| expand(self.trend_covariates.for_dim(d))).collect::<Result<_>>()?;
        let random = (0..nd).map(|d| expand(self.random_effects.for_dim(d))).collect::<Result<_>>()?;
        let influence = expand(&self.influence_regressors)?;
        if influence.is_empty() {
            return Err(Error::spec("influence_regressors must contain at least one regressor"));
        }
        let diag_full = match &self.influence_diag_time_varying {
            None => vec![true; nd],
            Some(v) if v.len() == nd => v.clone(),
            Some(v) => {
                return Err(Error::spec(format!(
                    "influence_diag_time_varying has {} entries, expected {nd}",
                    v.len()
                )))
            }
        };
        Ok(Structure {
            n_dims: nd,
            n_markers: self.markers.len(),
            baseline,
            trend,
            random,
            influence,
            diag_full,
            marker_dim: self.markers.iter().map(|m| m.dimension).collect(),
        })
    }

    /// Covariate names the design needs from every subject.
    pub fn covariate_names(&self) -> Result<BTreeSet<String>> {
        let s = self.structure()?;
        let mut out = BTreeSet::new();
        let all = s.baseline.iter().chain(&s.trend).chain(&s.random).flatten().chain(&s.influence);
        for t in all {
            if let Term::Covariate(c) = t {
                out.insert(c.clone());
            }
        }
        Ok(out)
    }

    /// Univariate sub-model of dimension `d`, used to build starting values.
    pub fn sub_model(&self, d: usize) -> Result<(ModelSpec, Vec<usize>)> {
        let nd = self.n_dims();
        if d >= nd {
            return Err(Error::spec(format!("no dimension {d}")));
        }
        let markers: Vec<usize> = (0..self.n_markers()).filter(|&k| self.markers[k].dimension == d).collect();
        let pick = |p: &PerDimension| PerDimension::Shared(p.for_dim(d).to_vec());
        let diag = self.influence_diag_time_varying.as_ref().map(|v| vec![v[d]]);
        let sub = ModelSpec {
            dimensions: vec![self.dimensions[d].clone()],
            markers: markers
                .iter()
                .map(|&k| MarkerSpec { dimension: 0, ..self.markers[k].clone() })
                .collect(),
            delta: self.delta,
            grid_len: self.grid_len,
            baseline_covariates: pick(&self.baseline_covariates),
            trend_covariates: pick(&self.trend_covariates),
            random_effects: pick(&self.random_effects),
            influence_regressors: self.influence_regressors.clone(),
            influence_diag_time_varying: diag,
            correlated_baseline: false,
        };
        Ok((sub, markers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn with_delta_keeps_time_span() {
        let spec: ModelSpec = serde_json::from_str(
            r#"{"dimensions":["a"],"markers":[{"name":"Y","dimension":0,"link":{"family":"linear"}}],
                "delta":1.0,"grid_len":6,"influence_regressors":["intercept"]}"#,
        )
        .unwrap();
        let half = spec.with_delta(0.5).unwrap();
        assert_eq!((half.delta, half.grid_len), (0.5, 12));
        assert_eq!(spec.with_delta(0.23).unwrap().grid_len, 26);
        assert!(spec.with_delta(0.0).is_err());
    }

    pub(crate) fn scenario2_json() -> &'static str {
        r#"{
            "dimensions": ["anatomy", "cognition"],
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
                {"time_bspline": {"internal_knots": [3.0], "lower": 0.0, "upper": 6.0}}],
            "influence_diag_time_varying": [false, false]
        }"#
    }

    #[test]
    fn parses_and_expands() {
        let spec = ModelSpec::from_json(scenario2_json()).unwrap();
        let s = spec.structure().unwrap();
        assert_eq!(s.r(), 4);
        assert_eq!(s.p0(), 2);
        assert_eq!(s.q(), 2);
        assert!(s.influence_active(0, 1, 3));
        assert!(!s.influence_active(0, 0, 1));
        assert_eq!(s.influence[3].name(), "S3");
    }

    #[test]
    fn baseline_intercept_is_rejected() {
        let text = scenario2_json().replace(r#""baseline_covariates": ["C2"]"#, r#""baseline_covariates": ["intercept"]"#);
        let err = ModelSpec::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("baseline_covariates"));
    }

    #[test]
    fn marker_pointing_nowhere_is_rejected() {
        let text = scenario2_json().replace(r#""dimension": 1"#, r#""dimension": 5"#);
        assert!(ModelSpec::from_json(&text).is_err());
    }

    #[test]
    fn per_dimension_lists() {
        let text = scenario2_json().replace(r#""baseline_covariates": ["C2"]"#, r#""baseline_covariates": [["C1", "C2"], []]"#);
        let s = ModelSpec::from_json(&text).unwrap().structure().unwrap();
        assert_eq!(s.baseline[0].len(), 2);
        assert_eq!(s.baseline[1].len(), 0);
        assert_eq!(s.baseline_offset(1), 2);
    }

    #[test]
    fn cholesky_pattern() {
        let spec = ModelSpec::from_json(scenario2_json()).unwrap();
        let s = spec.structure().unwrap();
        use CholeskyEntry::*;
        assert_eq!(s.cholesky_entry(0, 0, false), One);
        assert_eq!(s.cholesky_entry(1, 0, false), Zero);
        assert_eq!(s.cholesky_entry(1, 0, true), Free);
        assert_eq!(s.cholesky_entry(2, 0, false), Free);
        assert_eq!(s.cholesky_entry(2, 1, false), Zero);
        assert_eq!(s.cholesky_entry(3, 2, false), Zero);
        assert_eq!(s.cholesky_entry(3, 3, false), Free);
    }
}

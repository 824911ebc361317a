//! Long-format CSV data, fit reports and metadata.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Subject, Visit};
use crate::error::{Error, Result};
use crate::optimizer::{Convergence, FitResult};
use crate::prediction::finish;
use crate::spec::ModelSpec;

const SUBJECT: &str = "subject_id";
const TIME: &str = "time";
const MARKER: &str = "marker";
const VALUE: &str = "value";

fn is_missing(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | ".")
}

fn parse_num(s: &str, what: &str, line: u64) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::data(format!("line {line}: malformed {what} '{s}'")))
}

/// Read long-format records `subject_id, time, marker, value[, covariates...]`.
///
/// Rows with an empty or `NA` value are treated as missing. Markers are
/// ordered as in `spec`; a marker not named by `spec` is an error.
pub fn read_long_csv<R: Read>(reader: R, spec: &ModelSpec) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("missing required column '{name}'")))
    };
    let (c_subject, c_time, c_marker, c_value) = (col(SUBJECT)?, col(TIME)?, col(MARKER)?, col(VALUE)?);
    let covariate_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| ![c_subject, c_time, c_marker, c_value].contains(i))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let markers: Vec<String> = spec.markers.iter().map(|m| m.name.clone()).collect();
    let marker_pos: HashMap<&str, usize> = markers.iter().enumerate().map(|(k, m)| (m.as_str(), k)).collect();

    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, (BTreeMap<String, f64>, BTreeMap<u64, Visit>)> = HashMap::new();
    let mut records = 0usize;
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        records += 1;
        let id = row[c_subject].to_string();
        if id.is_empty() {
            return Err(Error::data(format!("line {line}: empty subject_id")));
        }
        let time = parse_num(&row[c_time], "time", line)?;
        if time < 0.0 {
            return Err(Error::data(format!("line {line}: negative time {time}")));
        }
        let marker = &row[c_marker];
        let k = *marker_pos
            .get(marker)
            .ok_or_else(|| Error::data(format!("line {line}: unknown marker '{marker}'")))?;
        let mut covs = BTreeMap::new();
        for (c, name) in &covariate_cols {
            if !is_missing(&row[*c]) {
                covs.insert(name.clone(), parse_num(&row[*c], name, line)?);
            }
        }
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (covs.clone(), BTreeMap::new())
        });
        if entry.0 != covs {
            return Err(Error::data(format!("line {line}: covariates of subject {id} change between rows")));
        }
        let visit = entry
            .1
            .entry(time.to_bits())
            .or_insert_with(|| Visit { time, values: vec![None; markers.len()] });
        if visit.values[k].is_some() {
            return Err(Error::data(format!("line {line}: duplicate record for subject {id}, time {time}, marker {marker}")));
        }
        if is_missing(&row[c_value]) {
            continue;
        }
        visit.values[k] = Some(parse_num(&row[c_value], "value", line)?);
    }
    if records == 0 {
        return Err(Error::data("no records"));
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let (covariates, visits) = subjects.remove(&id).unwrap_or_default();
            let mut visits: Vec<Visit> =
                visits.into_values().filter(|v| v.values.iter().any(Option::is_some)).collect();
            visits.sort_by(|a, b| a.time.total_cmp(&b.time));
            Subject { id, covariates, visits }
        })
        .collect();
    Ok(Dataset { markers, subjects })
}

pub fn load_long_csv(path: &Path, spec: &ModelSpec) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    read_long_csv(file, spec)
}

/// Long-format CSV; covariates become trailing columns in name order.
/// Missing marker values produce no row.
pub fn write_long_csv(data: &Dataset) -> Result<String> {
    let covs: BTreeSet<&String> = data.subjects.iter().flat_map(|s| s.covariates.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![SUBJECT.to_string(), TIME.to_string(), MARKER.to_string(), VALUE.to_string()];
    header.extend(covs.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for s in &data.subjects {
        let cov_fields: Vec<String> =
            covs.iter().map(|c| s.covariates.get(*c).map(|v| v.to_string()).unwrap_or_default()).collect();
        for v in &s.visits {
            for (k, y) in v.values.iter().enumerate() {
                if let Some(y) = y {
                    let mut rec = vec![s.id.clone(), v.time.to_string(), data.markers[k].clone(), y.to_string()];
                    rec.extend(cov_fields.iter().cloned());
                    w.write_record(&rec)?;
                }
            }
        }
    }
    finish(w)
}

/// SHA-256 of the canonical JSON form of a spec.
pub fn spec_hash(spec: &ModelSpec) -> Result<String> {
    let text = serde_json::to_string(spec)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Parameter table: `parameter, estimate, se, z, p`.
pub fn fit_table_csv(fit: &FitResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "estimate", "se", "z", "p"])?;
    for (i, name) in fit.names.iter().enumerate() {
        let (est, se) = (fit.theta_hat[i], fit.se[i]);
        w.write_record([
            name.clone(),
            est.to_string(),
            se.to_string(),
            (est / se).to_string(),
            fit.wald_p(i).to_string(),
        ])?;
    }
    finish(w)
}

/// Everything needed to reuse a fit: the knot-resolved spec, the estimates
/// and the convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub iterations: usize,
    pub converged: bool,
    pub convergence: Convergence,
    pub seed: Option<u64>,
    pub spec_hash: String,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub warnings: Vec<String>,
    pub names: Vec<String>,
    pub theta_hat: Vec<f64>,
    #[serde(with = "nullable::vec")]
    pub se: Vec<f64>,
    pub spec: ModelSpec,
}

/// Serde adapters writing non-finite floats as `null` and reading `null`
/// back as NaN.
pub mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }
}

impl FitMetadata {
    pub fn new(fit: &FitResult, spec: &ModelSpec, n_subjects: usize, n_observations: usize, seed: Option<u64>) -> Result<Self> {
        Ok(FitMetadata {
            loglik: fit.loglik,
            aic: fit.aic,
            n_params: fit.n_params,
            iterations: fit.iterations,
            converged: fit.converged,
            convergence: fit.convergence,
            seed,
            spec_hash: spec_hash(spec)?,
            n_subjects,
            n_observations,
            warnings: fit.warnings.clone(),
            names: fit.names.clone(),
            theta_hat: fit.theta_hat.clone(),
            se: fit.se.clone(),
            spec: spec.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let meta: FitMetadata = serde_json::from_str(text)?;
        if meta.theta_hat.len() != meta.names.len() {
            return Err(Error::data("fit metadata: estimates and names differ in length"));
        }
        Ok(meta)
    }
}

//! Longitudinal data: raw visits in continuous time and their binding onto a
//! model's discretization grid.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::spec::ModelSpec;

/// Tolerance when mapping a time onto its grid cell, so that `t = j * delta`
/// computed in floating point lands in cell `j`.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub time: f64,
    /// One entry per dataset marker; `None` when not measured.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub covariates: BTreeMap<String, f64>,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub markers: Vec<String>,
    pub subjects: Vec<Subject>,
}

/// One grid occasion of one subject, values in model marker order.
#[derive(Debug, Clone, PartialEq)]
pub struct Occasion {
    pub grid_index: usize,
    /// Earliest continuous visit time merged into this grid cell.
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

impl Occasion {
    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub covariates: BTreeMap<String, f64>,
    pub occasions: Vec<Occasion>,
}

impl SubjectData {
    pub fn horizon(&self) -> usize {
        self.occasions.last().map(|o| o.grid_index).unwrap_or(0)
    }

    pub fn n_observations(&self) -> usize {
        self.occasions.iter().map(|o| o.values.iter().flatten().count()).sum()
    }
}

/// Grid cell of a continuous time: `floor(t / delta)`.
pub fn grid_index(time: f64, delta: f64) -> usize {
    (time / delta + GRID_EPS).floor().max(0.0) as usize
}

impl Dataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m == name)
    }

    /// All observed values of one marker.
    pub fn marker_values(&self, name: &str) -> Vec<f64> {
        let Some(k) = self.marker_index(name) else { return Vec::new() };
        self.subjects.iter().flat_map(|s| s.visits.iter().filter_map(move |v| v[k])).collect()
    }

    /// Subset of subjects, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            markers: self.markers.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Map every subject onto the grid of `spec`. Subjects come out sorted by
    /// id; occasions without any observed model marker are dropped, as are
    /// subjects left without occasions.
    pub fn bind(&self, spec: &ModelSpec) -> Result<Vec<SubjectData>> {
        let cols: Vec<usize> = spec
            .markers
            .iter()
            .map(|m| {
                self.marker_index(&m.name)
                    .ok_or_else(|| Error::data(format!("marker {} not present in the data", m.name)))
            })
            .collect::<Result<_>>()?;
        let mut seen = HashMap::new();
        let mut out = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::data(format!("subject {} appears twice", s.id)));
            }
            let mut cells: BTreeMap<usize, Occasion> = BTreeMap::new();
            for v in &s.visits {
                if !(v.time.is_finite() && v.time >= 0.0) {
                    return Err(Error::data(format!("subject {}: invalid time {}", s.id, v.time)));
                }
                let j = grid_index(v.time, spec.delta);
                if j > spec.grid_len {
                    return Err(Error::data(format!(
                        "subject {}: time {} falls beyond the grid (grid_len {} x delta {})",
                        s.id, v.time, spec.grid_len, spec.delta
                    )));
                }
                let occ = cells.entry(j).or_insert_with(|| Occasion {
                    grid_index: j,
                    time: v.time,
                    values: vec![None; cols.len()],
                });
                occ.time = occ.time.min(v.time);
                for (k, &c) in cols.iter().enumerate() {
                    if let Some(y) = v.values[c] {
                        if !y.is_finite() {
                            return Err(Error::data(format!("subject {}: non-finite value", s.id)));
                        }
                        if occ.values[k].is_some() {
                            return Err(Error::data(format!(
                                "subject {}: two observations of marker {} in grid cell {j}; use a smaller delta",
                                s.id, spec.markers[k].name
                            )));
                        }
                        occ.values[k] = Some(y);
                    }
                }
            }
            let occasions: Vec<Occasion> =
                cells.into_values().filter(|o| o.values.iter().any(Option::is_some)).collect();
            if occasions.is_empty() {
                continue;
            }
            out.push(SubjectData { id: s.id.clone(), covariates: s.covariates.clone(), occasions });
        }
        if out.is_empty() {
            return Err(Error::data("no subject has observations of the model markers"));
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }
}

impl std::ops::Index<usize> for Visit {
    type Output = Option<f64>;
    fn index(&self, k: usize) -> &Option<f64> {
        &self.values[k]
    }
}

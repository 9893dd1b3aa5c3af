//! Cell-specific transition matrices from bounded covariates.
//!
//! A [`PerturbationSpec`] lowers one off-diagonal transition `i -> j` by
//! `strength * f(x)` for a monotone `f` with `f(0) = 0`, `f(1) = 1`, and moves
//! the removed mass onto `A[i][i]`: a covariate such as forest cover makes
//! leaving state `i` for `j` less likely and staying put more likely.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::Matrix;

/// Smallest value a dampened transition is allowed to reach.
pub const TRANSITION_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseShape {
    #[default]
    Linear,
    /// Logistic with midpoint 0.5 and steepness 10, rescaled onto [0, 1].
    Logistic,
}

impl ResponseShape {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ResponseShape::Linear => x,
            ResponseShape::Logistic => {
                let sigmoid = |z: f64| 1.0 / (1.0 + (-10.0 * (z - 0.5)).exp());
                let (lo, hi) = (sigmoid(0.0), sigmoid(1.0));
                ((sigmoid(x) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub covariate: String,
    pub from: usize,
    pub to: usize,
    /// In `[0, 1)`.
    pub strength: f64,
    #[serde(default)]
    pub shape: ResponseShape,
}

impl PerturbationSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.from >= k || self.to >= k {
            return Err(Error::param(
                "perturbation.from/to",
                format!("states must be below K = {k}, got {} -> {}", self.from, self.to),
            ));
        }
        if self.from == self.to {
            return Err(Error::param("perturbation.to", "must differ from `from`"));
        }
        if !(0.0..1.0).contains(&self.strength) {
            return Err(Error::param("perturbation.strength", format!("must lie in [0, 1), got {}", self.strength)));
        }
        Ok(())
    }
}

/// Named per-cell covariates, each clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateTable {
    n_cells: usize,
    values: BTreeMap<String, Vec<f64>>,
}

impl CovariateTable {
    pub fn new(n_cells: usize) -> Self {
        CovariateTable { n_cells, values: BTreeMap::new() }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Inserts a covariate, clamping values into [0, 1].
    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_cells {
            return Err(Error::ShapeMismatch(format!(
                "covariate `{name}` has {} values for {} cells",
                values.len(),
                self.n_cells
            )));
        }
        let clamped = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        self.values.insert(name.to_string(), clamped);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Reads long-format `cell_id,name,value` rows. Cells absent for a
    /// covariate default to 0; the returned warnings say how many.
    pub fn read_csv<R: Read>(reader: R, n_cells: usize) -> Result<(Self, Vec<String>)> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["cell_id", "name", "value"] {
            if !headers.iter().any(|h| h.trim() == col) {
                return Err(Error::MissingColumn(col.to_string()));
            }
        }
        let mut raw: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        let mut warnings = Vec::new();
        for (n, rec) in rdr.deserialize::<(usize, String, f64)>().enumerate() {
            let (cell, name, value) = rec.map_err(|e| Error::malformed("<covariates>", format!("row {}: {e}", n + 1)))?;
            if cell >= n_cells {
                return Err(Error::malformed("<covariates>", format!("row {}: cell {cell} out of range", n + 1)));
            }
            if !value.is_finite() {
                return Err(Error::malformed("<covariates>", format!("row {}: non-finite value", n + 1)));
            }
            if !(0.0..=1.0).contains(&value) {
                warnings.push(format!("covariate `{name}` at cell {cell} clamped from {value}"));
            }
            raw.entry(name).or_insert_with(|| vec![None; n_cells])[cell] = Some(value);
        }
        let mut table = CovariateTable::new(n_cells);
        for (name, vals) in raw {
            let missing = vals.iter().filter(|v| v.is_none()).count();
            if missing > 0 {
                let msg = format!("covariate `{name}` missing for {missing} cells; defaulting to 0");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            table.insert(&name, vals.into_iter().map(|v| v.unwrap_or(0.0)).collect())?;
        }
        Ok((table, warnings))
    }
}

/// Dampened value of one transition entry, never pushed below the floor
/// (entries already at or under it are left alone).
fn dampened(entry: f64, spec: &PerturbationSpec, x: f64) -> (f64, bool) {
    if entry <= TRANSITION_FLOOR {
        return (entry, false);
    }
    let target = entry - spec.strength * spec.shape.eval(x.clamp(0.0, 1.0));
    if target < TRANSITION_FLOOR {
        (TRANSITION_FLOOR, true)
    } else {
        (target, false)
    }
}

/// Applies the specs in order to the off-diagonal entries, then returns the
/// removed mass of each row to its diagonal. Specs touching disjoint entries
/// commute exactly; specs stacked on one entry commute up to rounding, since
/// the floor is absorbing.
fn apply(a: &Matrix, specs: &[(&PerturbationSpec, f64)], warnings: &mut Vec<String>) -> Matrix {
    let mut out = a.clone();
    for (spec, x) in specs {
        let (v, clamped) = dampened(out[spec.from][spec.to], spec, *x);
        if clamped {
            warnings.push(format!(
                "transition {} -> {} clamped at {TRANSITION_FLOOR} for {} = {x}",
                spec.from, spec.to, spec.covariate
            ));
        }
        out[spec.from][spec.to] = v;
    }
    for i in 0..a.len() {
        let removed: f64 = (0..a.len()).filter(|&j| j != i).map(|j| a[i][j] - out[i][j]).sum();
        if removed != 0.0 {
            out[i][i] += removed;
        }
    }
    out
}

/// One spec applied to one matrix at covariate value `x`.
pub fn perturb_transition(a: &Matrix, spec: &PerturbationSpec, x: f64) -> Result<(Matrix, Vec<String>)> {
    spec.validate(a.len())?;
    let mut warnings = Vec::new();
    let out = apply(a, &[(spec, x)], &mut warnings);
    Ok((out, warnings))
}

/// Per-cell transition matrices with every spec applied in declared order.
pub fn build_cell_transitions(
    a: &Matrix,
    table: &CovariateTable,
    specs: &[PerturbationSpec],
) -> Result<(Vec<Matrix>, Vec<String>)> {
    let mut columns = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate(a.len())?;
        columns.push(
            table
                .get(&spec.covariate)
                .ok_or_else(|| Error::UnknownCovariate(spec.covariate.clone()))?,
        );
    }
    let mut warnings = Vec::new();
    let mats = (0..table.n_cells())
        .map(|cell| {
            let bound: Vec<(&PerturbationSpec, f64)> =
                specs.iter().zip(&columns).map(|(s, col)| (s, col[cell])).collect();
            apply(a, &bound, &mut warnings)
        })
        .collect();
    Ok((mats, warnings))
}

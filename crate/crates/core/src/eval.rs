//! Scoring decoded fields against ground truth, and the cell size / shape
//! sweep.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec, Shape};
use crate::hmm::{self, FitInit, FitOptions, HmmParams};
use crate::hmrf::{self, FieldPosterior, StateField};
use crate::ingest::{aggregate, EventRecord};
use crate::sim::PointEvent;

/// Largest K for which label alignment searches all permutations.
pub const MAX_EXHAUSTIVE_K: usize = 6;

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn confusion_counts(decoded: &StateField, truth: &StateField, k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; k]; k];
    for (&d, &t) in decoded.states().iter().zip(truth.states()) {
        m[d][t] += 1;
    }
    m
}

/// Permutation `map[decoded] = truth` maximising agreement. The first
/// maximiser in lexicographic order wins, so an already aligned decoding maps
/// to the identity. Above [`MAX_EXHAUSTIVE_K`] states both fields are assumed
/// canonically ordered and the identity is returned.
pub fn align_labels(decoded: &StateField, truth: &StateField, k: usize) -> Result<Vec<usize>> {
    if !decoded.same_shape(truth) {
        return Err(Error::ShapeMismatch("decoded and true fields differ in shape".into()));
    }
    let k = k.max(decoded.max_state() + 1).max(truth.max_state() + 1);
    if k > MAX_EXHAUSTIVE_K {
        return Ok((0..k).collect());
    }
    let m = confusion_counts(decoded, truth, k);
    let mut best = (0..k).collect::<Vec<_>>();
    let mut best_hits = 0;
    for (n, perm) in permutations(k).into_iter().enumerate() {
        let hits: usize = (0..k).map(|d| m[d][perm[d]]).sum();
        if n == 0 || hits > best_hits {
            best_hits = hits;
            best = perm;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateErrors {
    /// `|fitted - true| / true` per true state.
    pub rate_t: Vec<f64>,
    pub rate_c: Vec<f64>,
}

/// Relative rate errors after mapping fitted states onto true ones.
pub fn rate_errors(fitted: &HmmParams, truth: &HmmParams, map: &[usize]) -> RateErrors {
    let k = truth.k();
    let mut rate_t = vec![f64::NAN; k];
    let mut rate_c = vec![f64::NAN; k];
    for (d, &t) in map.iter().enumerate().take(fitted.k()) {
        if t < k {
            rate_t[t] = (fitted.rate_t[d] - truth.rate_t[t]).abs() / truth.rate_t[t];
            rate_c[t] = (fitted.rate_c[d] - truth.rate_c[t]).abs() / truth.rate_c[t];
        }
    }
    RateErrors { rate_t, rate_c }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_sites: usize,
    /// `map[decoded] = truth`.
    pub alignment: Vec<usize>,
    pub accuracy: f64,
    /// `confusion[true][aligned decoded]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_true_state_prob: Option<f64>,
    pub rate_errors: Option<RateErrors>,
}

pub fn score(decoded: &StateField, posterior: Option<&FieldPosterior>, truth: &StateField, k: usize) -> Result<EvalReport> {
    let map = align_labels(decoded, truth, k)?;
    let k = map.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&d, &t) in decoded.states().iter().zip(truth.states()) {
        confusion[t][map[d]] += 1;
    }
    let n = decoded.states().len();
    let hits: usize = (0..k).map(|s| confusion[s][s]).sum();
    let mean_true_state_prob = match posterior {
        None => None,
        Some(p) => {
            if p.n_cells() != truth.n_cells() || p.years() != truth.years() || p.k() > k {
                return Err(Error::ShapeMismatch("posterior does not match the true field".into()));
            }
            let mut inverse = vec![usize::MAX; k];
            for (d, &t) in map.iter().enumerate() {
                inverse[t] = d;
            }
            let mut total = 0.0;
            for cell in 0..truth.n_cells() {
                for y in 0..truth.n_years() {
                    let d = inverse[truth.get(cell, y)];
                    total += p.marginal(cell, y).get(d).copied().unwrap_or(0.0);
                }
            }
            Some(total / n as f64)
        }
    };
    Ok(EvalReport {
        k,
        n_sites: n,
        alignment: map,
        accuracy: hits as f64 / n as f64,
        confusion,
        mean_true_state_prob,
        rate_errors: None,
    })
}

impl EvalReport {
    pub fn with_rate_errors(mut self, fitted: &HmmParams, truth: &HmmParams) -> Self {
        self.rate_errors = Some(rate_errors(fitted, truth, &self.alignment));
        self
    }

    /// `metric,key,value` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "key", "value"])?;
        w.write_record(["accuracy", "", &self.accuracy.to_string()])?;
        w.write_record(["n_sites", "", &self.n_sites.to_string()])?;
        if let Some(p) = self.mean_true_state_prob {
            w.write_record(["mean_true_state_prob", "", &p.to_string()])?;
        }
        for (d, t) in self.alignment.iter().enumerate() {
            w.write_record(["alignment", &d.to_string(), &t.to_string()])?;
        }
        for (t, row) in self.confusion.iter().enumerate() {
            for (d, n) in row.iter().enumerate() {
                w.write_record(["confusion", &format!("{t}:{d}"), &n.to_string()])?;
            }
        }
        if let Some(r) = &self.rate_errors {
            for (s, e) in r.rate_t.iter().enumerate() {
                w.write_record(["rate_t_rel_error", &s.to_string(), &e.to_string()])?;
            }
            for (s, e) in r.rate_c.iter().enumerate() {
                w.write_record(["rate_c_rel_error", &s.to_string(), &e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "aligned accuracy: {:.4} over {} sites", self.accuracy, self.n_sites);
        if let Some(p) = self.mean_true_state_prob {
            let _ = writeln!(s, "mean posterior probability of the true state: {p:.4}");
        }
        let _ = writeln!(s, "label alignment (decoded -> true): {:?}", self.alignment);
        let _ = writeln!(s, "confusion (rows = true, cols = aligned decoded):");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|n| format!("{n:>8}")).collect();
            let _ = writeln!(s, "  {}", cells.join(""));
        }
        if let Some(r) = &self.rate_errors {
            let _ = writeln!(s, "relative rate error T: {:?}", r.rate_t);
            let _ = writeln!(s, "relative rate error C: {:?}", r.rate_c);
        }
        s
    }
}

/// Coarse-grid truth: each coarse cell takes the majority state of the fine
/// cells whose centroids fall inside it, ties to the lower state. A coarse
/// cell containing no fine centroid takes the state of the fine cell under
/// its own centroid.
pub fn majority_truth(fine: &Grid, fine_field: &StateField, coarse: &Grid, k: usize) -> Result<StateField> {
    let n_years = fine_field.n_years();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); coarse.n_cells()];
    for cell in fine.cells() {
        if let Some(c) = coarse.locate(cell.centroid[0], cell.centroid[1])? {
            members[c.index()].push(cell.id.index());
        }
    }
    let mut paths = Vec::with_capacity(coarse.n_cells());
    for (c, list) in members.iter().enumerate() {
        let path: Vec<usize> = if list.is_empty() {
            let [x, y] = coarse.cells()[c].centroid;
            let f = fine
                .locate(x, y)?
                .ok_or_else(|| Error::InvalidGrid(format!("coarse cell {c} lies outside the reference grid")))?;
            fine_field.path(f.index()).to_vec()
        } else {
            (0..n_years)
                .map(|y| {
                    let mut votes = vec![0usize; k];
                    for &f in list {
                        votes[fine_field.get(f, y)] += 1;
                    }
                    let mut best = 0;
                    for s in 1..k {
                        if votes[s] > votes[best] {
                            best = s;
                        }
                    }
                    best
                })
                .collect()
        };
        paths.push(path);
    }
    StateField::from_paths(&paths, fine_field.years())
}

/// A fine-resolution simulated world shared by every sweep row.
#[derive(Debug, Clone)]
pub struct FineTruth {
    pub grid: Grid,
    pub field: StateField,
    pub events: Vec<PointEvent>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_size: f64,
    pub shape: Shape,
    pub n_cells: usize,
    pub total_events: u64,
    pub mean_events_per_cell_year: f64,
    pub accuracy: f64,
    /// Square root of the full cell area, in degrees.
    pub effective_resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Row with the highest accuracy; the earliest wins ties.
    pub fn optimal(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "cell_size",
            "shape",
            "n_cells",
            "total_events",
            "mean_events_per_cell_year",
            "accuracy",
            "effective_resolution",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.cell_size.to_string(),
                match r.shape {
                    Shape::Square => "square".into(),
                    Shape::Hex => "hex".into(),
                },
                r.n_cells.to_string(),
                r.total_events.to_string(),
                r.mean_events_per_cell_year.to_string(),
                r.accuracy.to_string(),
                r.effective_resolution.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("cell_size  shape   cells  events/cell-year  accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>9.4}  {:<6} {:>6}  {:>16.4}  {:>8.4}",
                r.cell_size,
                format!("{:?}", r.shape).to_lowercase(),
                r.n_cells,
                r.mean_events_per_cell_year,
                r.accuracy
            );
        }
        if let Some(best) = self.optimal() {
            let _ = writeln!(
                s,
                "optimal: {:?} cells of size {} (accuracy {:.4})",
                best.shape, best.cell_size, best.accuracy
            );
        }
        s
    }
}

/// For every target spec: aggregate the shared point events, fit a pooled
/// HMM, decode by posterior mode, and score against the majority-vote truth.
pub fn resolution_sweep(fine: &FineTruth, targets: &[GridSpec], fit: &FitOptions) -> Result<SweepResult> {
    for t in targets {
        if t.cell_area() <= fine.grid.spec().cell_area() {
            return Err(Error::InvalidGrid(format!(
                "target cell size {} is not coarser than the reference grid",
                t.cell_size
            )));
        }
    }
    let records: Vec<EventRecord> = fine.events.iter().map(|e| e.to_record()).collect();
    let years = fine.field.years();
    let rows = targets
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let grid = Grid::build(spec)?;
            let (panel, _) = aggregate(&records, &grid, years);
            let total = panel.total_t() + panel.total_c();
            let opts = FitOptions { k: fine.k, stream: i as u64, ..fit.clone() };
            let fitted = hmm::baum_welch_fit(&panel.sequences(), FitInit::Seeded, &opts)?;
            let (posterior, _) = hmrf::independent_decode(&fitted.params, &panel, None)?;
            let truth = majority_truth(&fine.grid, &fine.field, &grid, fine.k)?;
            let report = score(&posterior.mode(), None, &truth, fine.k)?;
            Ok(SweepRow {
                cell_size: spec.cell_size,
                shape: spec.shape,
                n_cells: grid.n_cells(),
                total_events: total,
                mean_events_per_cell_year: total as f64 / (grid.n_cells() * years.len()) as f64,
                accuracy: report.accuracy,
                effective_resolution: spec.cell_area().sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::YearRange;
    use proptest::prelude::*;

    fn field(states: &[usize]) -> StateField {
        let paths: Vec<Vec<usize>> = states.iter().map(|&s| vec![s]).collect();
        StateField::from_paths(&paths, YearRange::new(1, 1).unwrap()).unwrap()
    }

    #[test]
    fn permutations_enumerate_factorial() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(6).len(), 720);
        assert_eq!(permutations(3)[0], vec![0, 1, 2]);
    }

    #[test]
    fn identity_and_swap() {
        let truth = field(&[0, 1, 1, 0, 2]);
        assert_eq!(align_labels(&truth, &truth, 3).unwrap(), vec![0, 1, 2]);
        let swapped = truth.relabeled(&[1, 0, 2]);
        let map = align_labels(&swapped, &truth, 3).unwrap();
        assert_eq!(map, vec![1, 0, 2]);
        assert_eq!(score(&swapped, None, &truth, 3).unwrap().accuracy, 1.0);
    }

    #[test]
    fn perfect_and_constant_decodings() {
        let truth = field(&[0, 1, 0, 1, 1, 0]);
        let r = score(&truth, None, &truth, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![3, 0], vec![0, 3]]);
        let constant = field(&[0; 6]);
        let r = score(&constant, None, &truth, 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        for (t, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), truth.states().iter().filter(|&&s| s == t).count());
        }
    }

    #[test]
    fn large_k_falls_back_to_identity() {
        let truth = field(&[6, 5, 4, 3, 2, 1, 0]);
        let decoded = field(&[0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(align_labels(&decoded, &truth, 7).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn posterior_probability_of_truth() {
        let truth = field(&[0, 1]);
        let decoded = field(&[1, 0]);
        let post = FieldPosterior::from_marginals(2, YearRange::new(1, 1).unwrap(), 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let r = score(&decoded, Some(&post), &truth, 2).unwrap();
        // decoded label 1 plays true state 0 and vice versa
        assert_eq!(r.mean_true_state_prob, Some((0.75 + 0.5) / 2.0));
    }

    #[test]
    fn rate_errors_follow_alignment() {
        let truth = HmmParams::with_persistence(0.9, vec![5.0, 0.3], vec![0.2, 4.0]).unwrap();
        let fitted = HmmParams::with_persistence(0.9, vec![0.33, 5.5], vec![4.0, 0.2]).unwrap();
        let e = rate_errors(&fitted, &truth, &[1, 0]);
        assert!((e.rate_t[0] - 0.1).abs() < 1e-12);
        assert!((e.rate_t[1] - 0.1).abs() < 1e-12);
        assert_eq!(e.rate_c, vec![0.0, 0.0]);
    }

    #[test]
    fn majority_vote_ties_go_low() {
        let fine = Grid::build(&GridSpec::square(0.0, 0.0, 1.0, 1.0, 0.25)).unwrap();
        let coarse = Grid::build(&GridSpec::square(0.0, 0.0, 1.0, 1.0, 0.5)).unwrap();
        // coarse cell 0 holds fine cells 0, 1, 4, 5
        let mut states = vec![1; 16];
        states[0] = 0;
        states[1] = 0;
        let truth = majority_truth(&fine, &field(&states), &coarse, 2).unwrap();
        assert_eq!(truth.states(), &[0, 1, 1, 1]);
    }

    proptest! {
        #[test]
        fn accuracy_is_permutation_invariant(
            states in proptest::collection::vec((0usize..3, 0usize..3), 1..60),
            perm_index in 0usize..6,
        ) {
            let truth = field(&states.iter().map(|s| s.0).collect::<Vec<_>>());
            let decoded = field(&states.iter().map(|s| s.1).collect::<Vec<_>>());
            let perm = &permutations(3)[perm_index];
            let a = score(&decoded, None, &truth, 3).unwrap().accuracy;
            let b = score(&decoded.relabeled(perm), None, &truth, 3).unwrap().accuracy;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn two_state_alignment_is_at_least_half(states in proptest::collection::vec((0usize..2, 0usize..2), 1..80)) {
            let truth = field(&states.iter().map(|s| s.0).collect::<Vec<_>>());
            let decoded = field(&states.iter().map(|s| s.1).collect::<Vec<_>>());
            prop_assert!(score(&decoded, None, &truth, 2).unwrap().accuracy >= 0.5);
        }
    }
}

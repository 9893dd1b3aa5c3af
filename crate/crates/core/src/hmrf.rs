//! Hidden Markov random field: the per-cell chains coupled by a Potts
//! interaction between neighbouring cells within each year.
//!
//! The joint unnormalised log-score of a field `s` is
//!
//! ```text
//! sum_cells [ ln pi(s[c][0]) + sum_t ln A_c(s[c][t-1], s[c][t]) + sum_t ln p(t, c | s[c][t]) ]
//!   + beta * sum_years sum_{edges (i, j)} 1[s[i][y] == s[j][y]]
//! ```
//!
//! Temporal dependence stays in each chain's transition matrix; the Potts
//! term links only same-year neighbours. With `beta = 0` the model factorises
//! into independent HMMs.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{build_cell_transitions, CovariateTable, PerturbationSpec};
use crate::error::{Error, Result};
use crate::grid::NeighborGraph;
use crate::hmm::{self, argmax, FitInit, FitOptions, HmmParams, Matrix};
use crate::ingest::{CountPanel, YearRange};
use crate::rng;

/// Sites per colour class below which a Gibbs pass stays on one thread.
const PAR_THRESHOLD: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PottsParams {
    pub beta: f64,
    pub graph: NeighborGraph,
}

impl PottsParams {
    pub fn new(beta: f64, graph: NeighborGraph) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::param("beta", format!("must be finite and nonnegative, got {beta}")));
        }
        Ok(PottsParams { beta, graph })
    }
}

/// Hidden state per `(cell, year)`, cell-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateField {
    n_cells: usize,
    years: YearRange,
    states: Vec<usize>,
}

impl StateField {
    pub fn constant(n_cells: usize, years: YearRange, state: usize) -> Self {
        StateField {
            n_cells,
            years,
            states: vec![state; n_cells * years.len()],
        }
    }

    /// One path per cell, each of length `years.len()`.
    pub fn from_paths(paths: &[Vec<usize>], years: YearRange) -> Result<Self> {
        if let Some(p) = paths.iter().find(|p| p.len() != years.len()) {
            return Err(Error::ShapeMismatch(format!(
                "path of length {} for {} years",
                p.len(),
                years.len()
            )));
        }
        Ok(StateField {
            n_cells: paths.len(),
            years,
            states: paths.concat(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    #[inline]
    pub fn get(&self, cell: usize, year_index: usize) -> usize {
        self.states[cell * self.years.len() + year_index]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, year_index: usize, state: usize) {
        let n = self.years.len();
        self.states[cell * n + year_index] = state;
    }

    pub fn path(&self, cell: usize) -> &[usize] {
        let n = self.years.len();
        &self.states[cell * n..(cell + 1) * n]
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn max_state(&self) -> usize {
        self.states.iter().copied().max().unwrap_or(0)
    }

    /// Applies `map[old] = new` to every site.
    pub fn relabeled(&self, map: &[usize]) -> StateField {
        StateField {
            states: self.states.iter().map(|&s| map[s]).collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &StateField) -> bool {
        self.n_cells == other.n_cells && self.years == other.years
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["cell_id", "year", "state"])?;
        for cell in 0..self.n_cells {
            for y in 0..self.n_years() {
                w.write_record([
                    cell.to_string(),
                    self.years.year(y).to_string(),
                    self.get(cell, y).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `cell_id,year,state[,p_0..]` files; probability columns are ignored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        Ok(read_decoded(reader)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_samples: usize,
}

/// Per-site posterior state probabilities. `chain` is `None` for exact
/// (forward-backward) marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPosterior {
    n_cells: usize,
    years: YearRange,
    k: usize,
    marginal: Vec<f64>,
    pub chain: Option<ChainStats>,
}

impl FieldPosterior {
    pub fn from_marginals(n_cells: usize, years: YearRange, k: usize, marginal: Vec<f64>) -> Result<Self> {
        if marginal.len() != n_cells * years.len() * k {
            return Err(Error::ShapeMismatch("marginal table size".into()));
        }
        Ok(FieldPosterior { n_cells, years, k, marginal, chain: None })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn years(&self) -> YearRange {
        self.years
    }

    pub fn marginal(&self, cell: usize, year_index: usize) -> &[f64] {
        let i = (cell * self.years.len() + year_index) * self.k;
        &self.marginal[i..i + self.k]
    }

    /// Marginal posterior mode per site (lowest state on ties).
    pub fn mode(&self) -> StateField {
        StateField {
            n_cells: self.n_cells,
            years: self.years,
            states: self.marginal.chunks(self.k).map(argmax).collect(),
        }
    }

    /// `perm[new] = old`, as returned by [`HmmParams::canonicalize`].
    pub fn permuted(&self, perm: &[usize]) -> FieldPosterior {
        FieldPosterior {
            marginal: self
                .marginal
                .chunks(self.k)
                .flat_map(|m| perm.iter().map(move |&o| m[o]))
                .collect(),
            ..self.clone()
        }
    }

    /// `cell_id,year,state,p_0,..,p_{K-1}` with `state` taken from `decoded`.
    pub fn write_csv<W: Write>(&self, decoded: &StateField, writer: W) -> Result<()> {
        if decoded.n_cells != self.n_cells || decoded.years != self.years {
            return Err(Error::ShapeMismatch("decoded field and posterior differ in shape".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cell_id".to_string(), "year".into(), "state".into()];
        header.extend((0..self.k).map(|k| format!("p_{k}")));
        w.write_record(&header)?;
        for cell in 0..self.n_cells {
            for y in 0..self.years.len() {
                let mut row = vec![
                    cell.to_string(),
                    self.years.year(y).to_string(),
                    decoded.get(cell, y).to_string(),
                ];
                row.extend(self.marginal(cell, y).iter().map(|p| p.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a decoded-field CSV, returning the posterior too when `p_*` columns
/// are present.
pub fn read_decoded<R: Read>(reader: R) -> Result<(StateField, Option<FieldPosterior>)> {
    let bad = |msg: String| Error::malformed("<field>", msg);
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expect = ["cell_id", "year", "state"];
    if headers.len() < 3 || headers.iter().take(3).ne(expect) {
        return Err(bad("header must start with cell_id,year,state".into()));
    }
    let k = headers.len() - 3;
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| rec.get(i).unwrap_or("").trim();
        let cell: usize = num(0).parse().map_err(|_| bad(format!("row {}: bad cell_id", n + 1)))?;
        let year: i32 = num(1).parse().map_err(|_| bad(format!("row {}: bad year", n + 1)))?;
        let state: usize = num(2).parse().map_err(|_| bad(format!("row {}: bad state", n + 1)))?;
        let probs = (0..k)
            .map(|j| num(3 + j).parse::<f64>().map_err(|_| bad(format!("row {}: bad p_{j}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((cell, year, state, probs));
    }
    if rows.is_empty() {
        return Err(Error::Empty("field file has no rows".into()));
    }
    let n_cells = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let years = YearRange::new(
        rows.iter().map(|r| r.1).min().unwrap(),
        rows.iter().map(|r| r.1).max().unwrap(),
    )?;
    let n = n_cells * years.len();
    if rows.len() != n {
        return Err(bad(format!("expected {n} rows for a dense field, found {}", rows.len())));
    }
    let mut field = StateField::constant(n_cells, years, 0);
    let mut marginal = vec![0.0; n * k];
    let mut seen = vec![false; n];
    for (cell, year, state, probs) in rows {
        let yi = years.index_of(year).unwrap();
        let i = cell * years.len() + yi;
        if std::mem::replace(&mut seen[i], true) {
            return Err(bad(format!("duplicate row for cell {cell}, year {year}")));
        }
        field.set(cell, yi, state);
        marginal[i * k..(i + 1) * k].copy_from_slice(&probs);
    }
    let posterior = (k > 0).then(|| FieldPosterior {
        n_cells,
        years,
        k,
        marginal,
        chain: None,
    });
    Ok((field, posterior))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsSettings {
    /// Total sweeps including burn-in.
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsSettings {
    /// 200 retained samples after 50 sweeps of burn-in.
    fn default() -> Self {
        GibbsSettings { sweeps: 250, burn_in: 50, thin: 1 }
    }
}

impl GibbsSettings {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps <= self.burn_in {
            return Err(Error::param("gibbs.sweeps", "must exceed burn_in"));
        }
        if self.thin == 0 {
            return Err(Error::param("gibbs.thin", "must be at least 1"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.sweeps - self.burn_in).div_ceil(self.thin)
    }
}

/// The coupled model bound to one panel. Emission log-likelihoods are
/// tabulated once.
pub struct Hmrf<'a> {
    params: &'a HmmParams,
    potts: &'a PottsParams,
    years: YearRange,
    n_cells: usize,
    log_pi: Vec<f64>,
    /// One shared matrix, or one per cell.
    log_trans: Vec<Matrix>,
    emission: Vec<f64>,
    colors: Vec<Vec<usize>>,
}

fn ln_matrix(m: &Matrix) -> Matrix {
    m.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect()
}

impl<'a> Hmrf<'a> {
    pub fn new(params: &'a HmmParams, potts: &'a PottsParams, panel: &CountPanel) -> Result<Self> {
        Self::with_cell_transitions(params, potts, panel, None)
    }

    /// `cell_trans`, when given, replaces `params.trans` cell by cell.
    pub fn with_cell_transitions(
        params: &'a HmmParams,
        potts: &'a PottsParams,
        panel: &CountPanel,
        cell_trans: Option<&[Matrix]>,
    ) -> Result<Self> {
        params.validate()?;
        let n_cells = panel.n_cells();
        if potts.graph.len() != n_cells {
            return Err(Error::ShapeMismatch(format!(
                "neighbour graph has {} cells, panel has {n_cells}",
                potts.graph.len()
            )));
        }
        let log_trans = match cell_trans {
            Some(ms) if ms.len() != n_cells => {
                return Err(Error::ShapeMismatch("one transition matrix per cell required".into()))
            }
            Some(ms) => ms.iter().map(ln_matrix).collect(),
            None => vec![ln_matrix(&params.trans)],
        };
        let k = params.k();
        let n_years = panel.n_years();
        let mut emission = Vec::with_capacity(n_cells * n_years * k);
        for cell in 0..n_cells {
            for y in 0..n_years {
                let (t, c) = (panel.t(cell, y), panel.c(cell, y));
                emission.extend((0..k).map(|s| params.emission_loglik(t, c, s)));
            }
        }
        Ok(Hmrf {
            params,
            potts,
            years: panel.years(),
            n_cells,
            log_pi: params.pi.iter().map(|p| p.ln()).collect(),
            log_trans,
            emission,
            colors: potts.graph.color_classes(),
        })
    }

    pub fn k(&self) -> usize {
        self.params.k()
    }

    #[inline]
    fn log_a(&self, cell: usize) -> &Matrix {
        if self.log_trans.len() == 1 {
            &self.log_trans[0]
        } else {
            &self.log_trans[cell]
        }
    }

    #[inline]
    fn emission(&self, cell: usize, year_index: usize) -> &[f64] {
        let k = self.k();
        let i = (cell * self.years.len() + year_index) * k;
        &self.emission[i..i + k]
    }

    fn check_field(&self, field: &StateField) -> Result<()> {
        if field.n_cells != self.n_cells || field.years != self.years {
            return Err(Error::ShapeMismatch("state field does not match the panel".into()));
        }
        if field.max_state() >= self.k() {
            return Err(Error::ShapeMismatch(format!("field uses states beyond K = {}", self.k())));
        }
        Ok(())
    }

    /// Unnormalised log full conditional of site `(cell, year_index)`.
    pub fn conditional_log_weights(&self, field: &StateField, cell: usize, year_index: usize, out: &mut [f64]) {
        let k = self.k();
        let n_years = self.years.len();
        let log_a = self.log_a(cell);
        let emit = self.emission(cell, year_index);
        for (s, w) in out.iter_mut().enumerate().take(k) {
            *w = emit[s];
        }
        if year_index == 0 {
            for s in 0..k {
                out[s] += self.log_pi[s];
            }
        } else {
            let prev = field.get(cell, year_index - 1);
            for s in 0..k {
                out[s] += log_a[prev][s];
            }
        }
        if year_index + 1 < n_years {
            let next = field.get(cell, year_index + 1);
            for s in 0..k {
                out[s] += log_a[s][next];
            }
        }
        let beta = self.potts.beta;
        if beta != 0.0 {
            for &n in self.potts.graph.neighbors(cell) {
                out[field.get(n, year_index)] += beta;
            }
        }
    }

    /// Normalised full conditional distribution of one site. If every state
    /// is impossible the site falls back to a uniform distribution.
    pub fn full_conditional(&self, field: &StateField, cell: usize, year_index: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.k()];
        self.conditional_log_weights(field, cell, year_index, &mut w);
        normalize_log_weights(&mut w);
        w
    }

    /// Joint unnormalised log-score of a whole field.
    pub fn joint_log_score(&self, field: &StateField) -> f64 {
        let n_years = self.years.len();
        let mut score = 0.0;
        for cell in 0..self.n_cells {
            let log_a = self.log_a(cell);
            let path = field.path(cell);
            score += self.log_pi[path[0]];
            for y in 0..n_years {
                if y > 0 {
                    score += log_a[path[y - 1]][path[y]];
                }
                score += self.emission(cell, y)[path[y]];
            }
        }
        if self.potts.beta != 0.0 {
            let mut same = 0usize;
            for y in 0..n_years {
                same += self
                    .potts
                    .graph
                    .edges()
                    .filter(|&(i, j)| field.get(i, y) == field.get(j, y))
                    .count();
            }
            score += self.potts.beta * same as f64;
        }
        score
    }

    /// One systematic chromatic sweep: years in order, colour classes in
    /// order, and within a class every site drawn from its own keyed uniform.
    fn sweep(&self, field: &mut StateField, seed: u64, sweep: usize) {
        let k = self.k();
        for y in 0..self.years.len() {
            for class in &self.colors {
                let draw = |&cell: &usize| {
                    let mut w = vec![0.0; k];
                    self.conditional_log_weights(field, cell, y, &mut w);
                    normalize_log_weights(&mut w);
                    let u = rng::uniform(seed, &[rng::tag::GIBBS, sweep as u64, cell as u64, y as u64]);
                    rng::categorical(&w, u)
                };
                let new: Vec<usize> = if class.len() >= PAR_THRESHOLD {
                    class.par_iter().map(draw).collect()
                } else {
                    class.iter().map(draw).collect()
                };
                for (&cell, s) in class.iter().zip(new) {
                    field.set(cell, y, s);
                }
            }
        }
    }

    /// Runs the chain and hands every retained sample to `on_sample`.
    /// Returns the final state.
    pub fn run_chain<F>(&self, init: &StateField, settings: &GibbsSettings, seed: u64, mut on_sample: F) -> Result<StateField>
    where
        F: FnMut(&StateField),
    {
        settings.validate()?;
        self.check_field(init)?;
        let mut field = init.clone();
        for s in 0..settings.sweeps {
            self.sweep(&mut field, seed, s);
            if s >= settings.burn_in && (s - settings.burn_in) % settings.thin == 0 {
                on_sample(&field);
            }
        }
        Ok(field)
    }

    /// Systematic-scan Gibbs sampler; marginals are averaged over retained
    /// samples. Returns the posterior and the chain's final state.
    pub fn gibbs_sample(&self, init: &StateField, settings: &GibbsSettings, seed: u64) -> Result<(FieldPosterior, StateField)> {
        let k = self.k();
        let mut counts = vec![0u64; self.n_cells * self.years.len() * k];
        let mut n_samples = 0usize;
        let last = self.run_chain(init, settings, seed, |f| {
            n_samples += 1;
            for (i, &s) in f.states.iter().enumerate() {
                counts[i * k + s] += 1;
            }
        })?;
        let marginal = counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
        let posterior = FieldPosterior {
            n_cells: self.n_cells,
            years: self.years,
            k,
            marginal,
            chain: Some(ChainStats {
                sweeps: settings.sweeps,
                burn_in: settings.burn_in,
                thin: settings.thin,
                n_samples,
            }),
        };
        Ok((posterior, last))
    }

    /// Iterated conditional modes. A site moves only when another state is
    /// strictly better, so the joint score never decreases.
    pub fn icm_decode(&self, init: &StateField, max_sweeps: usize) -> Result<IcmOutcome> {
        if max_sweeps == 0 {
            return Err(Error::param("max_sweeps", "must be at least 1"));
        }
        self.check_field(init)?;
        let mut field = init.clone();
        let mut w = vec![0.0; self.k()];
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut changed = false;
            for y in 0..self.years.len() {
                for cell in 0..self.n_cells {
                    self.conditional_log_weights(&field, cell, y, &mut w);
                    let cur = field.get(cell, y);
                    let best = argmax(&w);
                    if w[best] > w[cur] {
                        #[cfg(debug_assertions)]
                        let before = self.joint_log_score(&field);
                        field.set(cell, y, best);
                        changed = true;
                        #[cfg(debug_assertions)]
                        {
                            let after = self.joint_log_score(&field);
                            debug_assert!(after >= before - 1e-9 * before.abs().max(1.0));
                        }
                    }
                }
            }
            if !changed {
                converged = true;
                break;
            }
        }
        Ok(IcmOutcome { field, sweeps, converged })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmOutcome {
    pub field: StateField,
    pub sweeps: usize,
    /// True when the last sweep changed nothing.
    pub converged: bool,
}

fn normalize_log_weights(w: &mut [f64]) {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut z = 0.0;
    for x in w.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    w.iter_mut().for_each(|x| *x /= z);
}

/// Exact per-cell posteriors and Viterbi paths of the uncoupled model.
pub fn independent_decode(
    params: &HmmParams,
    panel: &CountPanel,
    cell_trans: Option<&[Matrix]>,
) -> Result<(FieldPosterior, StateField)> {
    if let Some(ms) = cell_trans {
        if ms.len() != panel.n_cells() {
            return Err(Error::ShapeMismatch("one transition matrix per cell required".into()));
        }
    }
    let k = params.k();
    let per_cell: Vec<(Vec<Vec<f64>>, Vec<usize>)> = (0..panel.n_cells())
        .into_par_iter()
        .map(|cell| {
            let obs = panel.sequence(cell);
            let owned;
            let p = match cell_trans {
                Some(ms) => {
                    owned = params.with_trans(ms[cell].clone());
                    &owned
                }
                None => params,
            };
            let post = hmm::forward_backward(p, &obs)?;
            let (path, _) = hmm::viterbi(p, &obs)?;
            Ok((post.gamma, path))
        })
        .collect::<Result<_>>()?;
    let marginal: Vec<f64> = per_cell.iter().flat_map(|(g, _)| g.iter().flatten().copied()).collect();
    let paths: Vec<Vec<usize>> = per_cell.into_iter().map(|(_, p)| p).collect();
    let posterior = FieldPosterior::from_marginals(panel.n_cells(), panel.years(), k, marginal)?;
    Ok((posterior, StateField::from_paths(&paths, panel.years())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McemSettings {
    pub em_iters: usize,
    /// Chain settings for every E-step and for the final posterior.
    pub gibbs: GibbsSettings,
}

impl Default for McemSettings {
    fn default() -> Self {
        McemSettings {
            em_iters: 20,
            gibbs: GibbsSettings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct McemResult {
    /// Canonically ordered.
    pub params: HmmParams,
    pub posterior: FieldPosterior,
    /// Marginal posterior mode of `posterior`.
    pub decoded: StateField,
    /// Mean complete-data log-score of each E-step's samples.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Monte-Carlo EM for the coupled model at fixed `beta`.
///
/// Starts from `init` (or a Baum-Welch fit of the uncoupled model), seeds the
/// field with per-cell Viterbi paths, then alternates Gibbs E-steps with the
/// closed-form M-step on sampled state counts. Covariates, when given, only
/// affect the final posterior run: the fitted shared transition matrix is
/// put in canonical state order and then perturbed cell by cell, so
/// perturbation specs name canonical states.
pub fn mcem_fit(
    panel: &CountPanel,
    potts: &PottsParams,
    init: FitInit,
    fit_opts: &FitOptions,
    settings: &McemSettings,
    covariates: Option<(&CovariateTable, &[PerturbationSpec])>,
    seed: u64,
) -> Result<McemResult> {
    settings.gibbs.validate()?;
    let mut params = match init {
        FitInit::Params(p) => p,
        FitInit::Seeded => hmm::baum_welch_fit(&panel.sequences(), FitInit::Seeded, fit_opts)?.params,
    };
    params.validate()?;
    let k = params.k();
    let n_years = panel.n_years();

    let (_, mut field) = independent_decode(&params, panel, None)?;
    let mut trace = Vec::with_capacity(settings.em_iters);
    let mut warnings = Vec::new();

    for it in 0..settings.em_iters {
        let model = Hmrf::new(&params, potts, panel)?;
        let mut first = vec![0.0; k];
        let mut trans = vec![vec![0.0; k]; k];
        let mut occupancy = vec![0.0; k];
        let mut t_sum = vec![0.0; k];
        let mut c_sum = vec![0.0; k];
        let mut score = 0.0;
        let mut n = 0usize;
        let iter_seed = rng::mix(seed, &[rng::tag::MCEM, it as u64]);
        field = model.run_chain(&field, &settings.gibbs, iter_seed, |f| {
            n += 1;
            score += model.joint_log_score(f);
            for cell in 0..panel.n_cells() {
                let path = f.path(cell);
                first[path[0]] += 1.0;
                for y in 0..n_years {
                    let s = path[y];
                    occupancy[s] += 1.0;
                    t_sum[s] += panel.t(cell, y) as f64;
                    c_sum[s] += panel.c(cell, y) as f64;
                    if y > 0 {
                        trans[path[y - 1]][s] += 1.0;
                    }
                }
            }
        })?;
        trace.push(score / n as f64);
        params = hmm::m_step(&params, &first, &trans, &occupancy, &t_sum, &c_sum, &mut warnings);
    }

    let (canon, perm) = params.canonicalize();
    let mut relabel = vec![0; k];
    for (new, &old) in perm.iter().enumerate() {
        relabel[old] = new;
    }
    let field = field.relabeled(&relabel);
    let cell_trans = match covariates {
        Some((table, specs)) => {
            if table.n_cells() != panel.n_cells() {
                return Err(Error::ShapeMismatch("covariate table and panel differ in cell count".into()));
            }
            let (mats, w) = build_cell_transitions(&canon.trans, table, specs)?;
            warnings.extend(w);
            Some(mats)
        }
        None => None,
    };
    let model = Hmrf::with_cell_transitions(&canon, potts, panel, cell_trans.as_deref())?;
    let final_seed = rng::mix(seed, &[rng::tag::MCEM, settings.em_iters as u64]);
    let (posterior, _) = model.gibbs_sample(&field, &settings.gibbs, final_seed)?;
    let decoded = posterior.mode();
    Ok(McemResult {
        params: canon,
        posterior,
        decoded,
        trace,
        warnings,
    })
}

/// Log pseudo-likelihood of the Potts prior alone:
/// `sum_sites [beta * n_same - ln sum_k exp(beta * n_k)]`.
pub fn pseudo_loglik(field: &StateField, graph: &NeighborGraph, k: usize, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut counts = vec![0usize; k];
    for y in 0..field.n_years() {
        for cell in 0..field.n_cells() {
            counts.iter_mut().for_each(|c| *c = 0);
            for &n in graph.neighbors(cell) {
                counts[field.get(n, y)] += 1;
            }
            let own = beta * counts[field.get(cell, y)] as f64;
            let max = beta * *counts.iter().max().unwrap() as f64;
            let lse = max + counts.iter().map(|&c| (beta * c as f64 - max).exp()).sum::<f64>().ln();
            total += own - lse;
        }
    }
    total
}

/// Candidate maximising the pseudo-likelihood of `field`; the earliest
/// candidate wins ties.
pub fn estimate_beta(field: &StateField, graph: &NeighborGraph, k: usize, candidates: &[f64]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::param("beta_candidates", "must not be empty"));
    }
    let k = k.max(field.max_state() + 1);
    let mut best = (candidates[0], pseudo_loglik(field, graph, k, candidates[0]));
    for &b in &candidates[1..] {
        let pl = pseudo_loglik(field, graph, k, b);
        if pl > best.1 {
            best = (b, pl);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::persistence_matrix;

    fn years(n: i32) -> YearRange {
        YearRange::new(2000, 2000 + n - 1).unwrap()
    }

    fn flat_params(k: usize) -> HmmParams {
        HmmParams::with_persistence(1.0 / k as f64, vec![1.0; k], vec![1.0; k]).unwrap()
    }

    #[test]
    fn beta_zero_matches_chain_conditional() {
        let params = HmmParams::with_persistence(0.8, vec![4.0, 0.5], vec![0.5, 3.0]).unwrap();
        let panel = CountPanel::from_counts(4, years(3), vec![3, 0, 1, 5, 2, 0, 0, 0, 1, 2, 2, 2], vec![0; 12]).unwrap();
        let graph = NeighborGraph::lattice(2, 2);
        let zero = PottsParams::new(0.0, graph.clone()).unwrap();
        let model = Hmrf::new(&params, &zero, &panel).unwrap();
        let field = StateField::from_paths(&[vec![0, 1, 0], vec![1, 1, 1], vec![0, 0, 0], vec![1, 0, 1]], years(3)).unwrap();
        let p = model.full_conditional(&field, 1, 1);
        // A[s_prev][k] A[k][s_next] p(obs | k), normalised by hand
        let (t, c) = (panel.t(1, 1), panel.c(1, 1));
        let mut w: Vec<f64> = (0..2)
            .map(|s| params.trans[1][s] * params.trans[s][1] * params.emission_loglik(t, c, s).exp())
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        assert!((p[0] - w[0]).abs() < 1e-12 && (p[1] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn strong_coupling_concentrates_mass() {
        let params = flat_params(3);
        let panel = CountPanel::zeros(5, years(1));
        // star: centre 0 joined to four leaves, all in state 2
        let graph = NeighborGraph::from_adjacency(vec![vec![1, 2, 3, 4], vec![], vec![], vec![], vec![]]);
        let potts = PottsParams::new(10.0, graph).unwrap();
        let model = Hmrf::new(&params, &potts, &panel).unwrap();
        let field = StateField::constant(5, years(1), 2);
        assert!(model.full_conditional(&field, 0, 0)[2] > 0.999);
    }

    #[test]
    fn isolated_cell_ignores_beta() {
        let params = HmmParams::with_persistence(0.7, vec![2.0, 0.1], vec![0.1, 2.0]).unwrap();
        let panel = CountPanel::from_counts(3, years(2), vec![1, 0, 2, 3, 0, 1], vec![0, 1, 0, 2, 2, 0]).unwrap();
        let graph = NeighborGraph::from_adjacency(vec![vec![1], vec![], vec![]]);
        let field = StateField::from_paths(&[vec![0, 0], vec![1, 1], vec![0, 1]], years(2)).unwrap();
        let strong = PottsParams::new(7.5, graph.clone()).unwrap();
        let zero = PottsParams::new(0.0, graph).unwrap();
        let a = Hmrf::new(&params, &strong, &panel).unwrap().full_conditional(&field, 2, 1);
        let b = Hmrf::new(&params, &zero, &panel).unwrap().full_conditional(&field, 2, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PottsParams::new(-1.0, NeighborGraph::empty(1)).is_err());
        assert!(PottsParams::new(f64::NAN, NeighborGraph::empty(1)).is_err());
        let params = flat_params(2);
        let panel = CountPanel::zeros(4, years(1));
        let potts = PottsParams::new(0.5, NeighborGraph::empty(3)).unwrap();
        assert!(Hmrf::new(&params, &potts, &panel).is_err());
        let potts = PottsParams::new(0.5, NeighborGraph::lattice(2, 2)).unwrap();
        let model = Hmrf::new(&params, &potts, &panel).unwrap();
        let field = StateField::constant(4, years(1), 0);
        let bad = GibbsSettings { sweeps: 5, burn_in: 5, thin: 1 };
        assert!(model.gibbs_sample(&field, &bad, 0).is_err());
        let bad = GibbsSettings { sweeps: 6, burn_in: 5, thin: 0 };
        assert!(model.gibbs_sample(&field, &bad, 0).is_err());
        assert!(model.icm_decode(&field, 0).is_err());
        let out_of_range = StateField::constant(4, years(1), 2);
        assert!(model.icm_decode(&out_of_range, 3).is_err());
    }

    #[test]
    fn gibbs_is_seed_deterministic() {
        let params = HmmParams::with_persistence(0.8, vec![3.0, 0.2], vec![0.2, 3.0]).unwrap();
        let t: Vec<u32> = (0..30 * 4).map(|i| (i % 5) as u32).collect();
        let c: Vec<u32> = (0..30 * 4).map(|i| (i % 3) as u32).collect();
        let panel = CountPanel::from_counts(30, years(4), t, c).unwrap();
        let potts = PottsParams::new(0.6, NeighborGraph::lattice(6, 5)).unwrap();
        let model = Hmrf::new(&params, &potts, &panel).unwrap();
        let init = StateField::constant(30, years(4), 0);
        let s = GibbsSettings { sweeps: 40, burn_in: 10, thin: 3 };
        let (a, la) = model.gibbs_sample(&init, &s, 9).unwrap();
        let (b, lb) = model.gibbs_sample(&init, &s, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.chain.unwrap().n_samples, 10);
        let (c, _) = model.gibbs_sample(&init, &s, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_potts_keeps_icm_init() {
        let params = flat_params(3);
        let panel = CountPanel::zeros(9, years(3));
        let potts = PottsParams::new(1e6, NeighborGraph::lattice(3, 3)).unwrap();
        let model = Hmrf::new(&params, &potts, &panel).unwrap();
        let init = StateField::constant(9, years(3), 1);
        let out = model.icm_decode(&init, 10).unwrap();
        assert_eq!(out.field, init);
        assert!(out.converged);
        assert_eq!(out.sweeps, 1);
    }

    #[test]
    fn icm_terminates_at_a_local_optimum() {
        let params = HmmParams::new(
            vec![0.5, 0.5],
            persistence_matrix(2, 0.85),
            vec![2.0, 0.4],
            vec![0.3, 1.8],
        )
        .unwrap();
        let t: Vec<u32> = (0..16 * 5).map(|i| ((i * 7) % 5) as u32).collect();
        let c: Vec<u32> = (0..16 * 5).map(|i| ((i * 3) % 4) as u32).collect();
        let panel = CountPanel::from_counts(16, years(5), t, c).unwrap();
        let potts = PottsParams::new(0.7, NeighborGraph::lattice(4, 4)).unwrap();
        let model = Hmrf::new(&params, &potts, &panel).unwrap();
        let out = model.icm_decode(&StateField::constant(16, years(5), 0), 100).unwrap();
        assert!(out.converged);
        let score = model.joint_log_score(&out.field);
        for cell in 0..16 {
            for y in 0..5 {
                let mut alt = out.field.clone();
                alt.set(cell, y, 1 - out.field.get(cell, y));
                assert!(model.joint_log_score(&alt) <= score + 1e-9);
            }
        }
    }

    #[test]
    fn pseudo_likelihood_examples() {
        let graph = NeighborGraph::lattice(4, 4);
        let checker: Vec<Vec<usize>> = (0..16).map(|i| vec![(i % 4 + i / 4) % 2]).collect();
        let field = StateField::from_paths(&checker, years(1)).unwrap();
        let cands = [0.0, 0.25, 0.5, 1.0];
        let pls: Vec<f64> = cands.iter().map(|&b| pseudo_loglik(&field, &graph, 2, b)).collect();
        assert!(pls.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(estimate_beta(&field, &graph, 2, &cands).unwrap(), 0.0);
        assert_eq!(estimate_beta(&field, &graph, 2, &[0.7]).unwrap(), 0.7);
        assert!(estimate_beta(&field, &graph, 2, &[]).is_err());
        // a constant field favours the largest coupling
        let flat = StateField::constant(16, years(1), 1);
        assert_eq!(estimate_beta(&flat, &graph, 2, &cands).unwrap(), 1.0);
    }

    #[test]
    fn decoded_csv_round_trip() {
        let y = years(2);
        let field = StateField::from_paths(&[vec![0, 1], vec![2, 2]], y).unwrap();
        let post = FieldPosterior::from_marginals(2, y, 3, vec![
            0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.0, 0.0, 1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,
        ])
        .unwrap();
        let mut buf = Vec::new();
        post.write_csv(&field, &mut buf).unwrap();
        let (f2, p2) = read_decoded(buf.as_slice()).unwrap();
        assert_eq!(f2, field);
        assert_eq!(p2.unwrap(), post);

        let mut plain = Vec::new();
        field.write_csv(&mut plain).unwrap();
        assert_eq!(StateField::read_csv(plain.as_slice()).unwrap(), field);
    }

    #[test]
    fn posterior_permutation_and_mode() {
        let y = years(1);
        let post = FieldPosterior::from_marginals(2, y, 3, vec![0.2, 0.5, 0.3, 0.4, 0.4, 0.2]).unwrap();
        assert_eq!(post.mode().states(), &[1, 0]);
        let p = post.permuted(&[2, 0, 1]);
        assert_eq!(p.marginal(0, 0), &[0.3, 0.2, 0.5]);
    }
}

//! Discrete-state HMM with independent bivariate Poisson emissions.
//!
//! One chain per grid cell, one step per year. Each state `k` emits the
//! year's terrorist-attack count `t ~ Poisson(rate_t[k])` and conventional
//! war-act count `c ~ Poisson(rate_c[k])`, independently given the state.
//!
//! States are kept in a canonical order: decreasing terror share
//! `rate_t / (rate_t + rate_c)`, so state 0 is the most terrorism-dominated
//! (weakest rebel control) and state `K - 1` the most conventional.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::rng;

/// Row-major `K x K` transition matrix; `m[i][j] = P(next = j | current = i)`.
pub type Matrix = Vec<Vec<f64>>;

/// Lower bound applied to Poisson rates during EM.
pub const RATE_FLOOR: f64 = 1e-6;

const STOCHASTIC_TOL: f64 = 1e-9;
const SHARE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub pi: Vec<f64>,
    pub trans: Matrix,
    pub rate_t: Vec<f64>,
    pub rate_c: Vec<f64>,
}

impl HmmParams {
    pub fn new(pi: Vec<f64>, trans: Matrix, rate_t: Vec<f64>, rate_c: Vec<f64>) -> Result<Self> {
        let p = HmmParams { pi, trans, rate_t, rate_c };
        p.validate()?;
        Ok(p)
    }

    /// Uniform `pi` and a transition matrix with `diag` on the diagonal and the
    /// rest spread evenly.
    pub fn with_persistence(diag: f64, rate_t: Vec<f64>, rate_c: Vec<f64>) -> Result<Self> {
        let k = rate_t.len();
        if k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        Self::new(vec![1.0 / k as f64; k], persistence_matrix(k, diag), rate_t, rate_c)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        if self.trans.len() != k || self.trans.iter().any(|r| r.len() != k) {
            return Err(Error::param("trans", format!("must be {k} x {k}")));
        }
        if self.rate_t.len() != k || self.rate_c.len() != k {
            return Err(Error::param("rate_t/rate_c", format!("must have {k} entries")));
        }
        check_distribution("pi", &self.pi)?;
        for (i, row) in self.trans.iter().enumerate() {
            check_distribution(&format!("trans[{i}]"), row)?;
        }
        for (name, rates) in [("rate_t", &self.rate_t), ("rate_c", &self.rate_c)] {
            if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
                return Err(Error::param(name, "rates must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Same model with a different transition matrix.
    pub fn with_trans(&self, trans: Matrix) -> Self {
        HmmParams { trans, ..self.clone() }
    }

    /// Log-probability of observing `(t, c)` in `state`. A zero rate emits
    /// zero with probability one and anything else with probability zero.
    #[inline]
    pub fn emission_loglik(&self, t: u32, c: u32, state: usize) -> f64 {
        poisson_ln_pmf(t, self.rate_t[state]) + poisson_ln_pmf(c, self.rate_c[state])
    }

    pub fn terror_share(&self, state: usize) -> f64 {
        self.rate_t[state] / (self.rate_t[state] + self.rate_c[state] + SHARE_EPS)
    }

    /// Relabels states into canonical order, returning the new parameters and
    /// `perm` with `perm[new] = old`.
    pub fn canonicalize(&self) -> (HmmParams, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.k()).collect();
        perm.sort_by(|&a, &b| {
            self.terror_share(b)
                .total_cmp(&self.terror_share(a))
                .then(self.rate_t[b].total_cmp(&self.rate_t[a]))
                .then(self.rate_c[a].total_cmp(&self.rate_c[b]))
                .then(self.pi[b].total_cmp(&self.pi[a]))
                .then(self.trans[b][b].total_cmp(&self.trans[a][a]))
        });
        (self.permuted(&perm), perm)
    }

    /// Parameters with state `new` taking the role of old state `perm[new]`.
    pub fn permuted(&self, perm: &[usize]) -> HmmParams {
        HmmParams {
            pi: perm.iter().map(|&o| self.pi[o]).collect(),
            trans: perm
                .iter()
                .map(|&oi| perm.iter().map(|&oj| self.trans[oi][oj]).collect())
                .collect(),
            rate_t: perm.iter().map(|&o| self.rate_t[o]).collect(),
            rate_c: perm.iter().map(|&o| self.rate_c[o]).collect(),
        }
    }

    /// Versioned plain-text form. Floats carry 17 significant digits, so
    /// [`HmmParams::from_text`] restores them bit-for-bit.
    pub fn to_text(&self) -> String {
        let fmt_row = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        out.push_str("# tercon HMM parameters\n");
        out.push_str("format = tercon-hmm\n");
        out.push_str("version = 1\n");
        let _ = writeln!(out, "k = {}", self.k());
        let _ = writeln!(out, "pi = {}", fmt_row(&self.pi));
        for (i, row) in self.trans.iter().enumerate() {
            let _ = writeln!(out, "trans.{i} = {}", fmt_row(row));
        }
        let _ = writeln!(out, "rate_t = {}", fmt_row(&self.rate_t));
        let _ = writeln!(out, "rate_c = {}", fmt_row(&self.rate_c));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::malformed("<hmm params>", msg);
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| map.get(key).ok_or_else(|| bad(format!("missing key `{key}`")));
        if get("format")? != "tercon-hmm" {
            return Err(bad("not a tercon-hmm file".into()));
        }
        if get("version")? != "1" {
            return Err(bad(format!("unsupported version {}", get("version")?)));
        }
        let k: usize = get("k")?.parse().map_err(|_| bad("bad `k`".into()))?;
        let row = |key: &str| -> Result<Vec<f64>> {
            let v = get(key)?
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number {x:?} in `{key}`"))))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != k {
                return Err(bad(format!("`{key}` has {} entries, expected {k}", v.len())));
            }
            Ok(v)
        };
        let trans = (0..k).map(|i| row(&format!("trans.{i}"))).collect::<Result<Vec<_>>>()?;
        HmmParams::new(row("pi")?, trans, row("rate_t")?, row("rate_c")?)
    }
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::param(name, "entries must be finite and nonnegative"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::param(name, format!("must sum to 1, sums to {sum}")));
    }
    Ok(())
}

pub fn persistence_matrix(k: usize, diag: f64) -> Matrix {
    if k == 1 {
        return vec![vec![1.0]];
    }
    let off = (1.0 - diag) / (k - 1) as f64;
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { diag } else { off }).collect())
        .collect()
}

#[inline]
pub fn poisson_ln_pmf(n: u32, rate: f64) -> f64 {
    if rate == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * rate.ln() - rate - ln_factorial(n as u64)
}

/// One cell's yearly `(t, c)` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSequence {
    t: Vec<u32>,
    c: Vec<u32>,
}

impl ObservationSequence {
    pub fn new(t: Vec<u32>, c: Vec<u32>) -> Result<Self> {
        if t.len() != c.len() {
            return Err(Error::ShapeMismatch(format!(
                "t has {} steps but c has {}",
                t.len(),
                c.len()
            )));
        }
        if t.is_empty() {
            return Err(Error::Empty("observation sequence".into()));
        }
        Ok(ObservationSequence { t, c })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_counts(&self) -> &[u32] {
        &self.t
    }

    pub fn c_counts(&self) -> &[u32] {
        &self.c
    }

    pub fn get(&self, step: usize) -> (u32, u32) {
        (self.t[step], self.c[step])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMarginals {
    /// `gamma[step][k] = P(state_step = k | obs)`.
    pub gamma: Vec<Vec<f64>>,
    /// `xi[step][i][j] = P(state_step = i, state_step+1 = j | obs)`, one fewer
    /// entry than `gamma`.
    pub xi: Vec<Matrix>,
    pub loglik: f64,
}

/// Emission likelihoods rescaled per step by their maximum, with the log of
/// that maximum kept aside.
fn scaled_emissions(params: &HmmParams, obs: &ObservationSequence) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = params.k();
    let mut scaled = Vec::with_capacity(obs.len());
    let mut offsets = Vec::with_capacity(obs.len());
    for step in 0..obs.len() {
        let (t, c) = obs.get(step);
        let logs: Vec<f64> = (0..k).map(|s| params.emission_loglik(t, c, s)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ImpossibleObservation { step });
        }
        scaled.push(logs.iter().map(|l| (l - max).exp()).collect());
        offsets.push(max);
    }
    Ok((scaled, offsets))
}

/// Scaled forward-backward recursions.
pub fn forward_backward(params: &HmmParams, obs: &ObservationSequence) -> Result<PosteriorMarginals> {
    let k = params.k();
    let n = obs.len();
    let (emit, offsets) = scaled_emissions(params, obs)?;
    let a = &params.trans;

    let mut alpha = vec![vec![0.0; k]; n];
    let mut scale = vec![0.0; n];
    for s in 0..k {
        alpha[0][s] = params.pi[s] * emit[0][s];
    }
    for step in 0..n {
        if step > 0 {
            for j in 0..k {
                let mut acc = 0.0;
                for i in 0..k {
                    acc += alpha[step - 1][i] * a[i][j];
                }
                alpha[step][j] = acc * emit[step][j];
            }
        }
        let sum: f64 = alpha[step].iter().sum();
        if !(sum > 0.0) {
            return Err(Error::ImpossibleObservation { step });
        }
        scale[step] = sum;
        alpha[step].iter_mut().for_each(|x| *x /= sum);
    }

    let mut beta = vec![vec![1.0; k]; n];
    for step in (0..n - 1).rev() {
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..k {
                acc += a[i][j] * emit[step + 1][j] * beta[step + 1][j];
            }
            beta[step][i] = acc / scale[step + 1];
        }
    }

    let gamma: Vec<Vec<f64>> = (0..n)
        .map(|step| {
            let mut g: Vec<f64> = (0..k).map(|s| alpha[step][s] * beta[step][s]).collect();
            let z: f64 = g.iter().sum();
            g.iter_mut().for_each(|x| *x /= z);
            g
        })
        .collect();

    let xi: Vec<Matrix> = (0..n.saturating_sub(1))
        .map(|step| {
            let mut m: Matrix = (0..k)
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            alpha[step][i] * a[i][j] * emit[step + 1][j] * beta[step + 1][j]
                                / scale[step + 1]
                        })
                        .collect()
                })
                .collect();
            let z: f64 = m.iter().flatten().sum();
            m.iter_mut().flatten().for_each(|x| *x /= z);
            m
        })
        .collect();

    let loglik = scale.iter().zip(&offsets).map(|(c, m)| c.ln() + m).sum();
    Ok(PosteriorMarginals { gamma, xi, loglik })
}

/// Most probable state path and its joint log-probability. Ties go to the
/// lower state index, both in the final state and at each back-pointer.
pub fn viterbi(params: &HmmParams, obs: &ObservationSequence) -> Result<(Vec<usize>, f64)> {
    let k = params.k();
    let n = obs.len();
    let log_a: Vec<Vec<f64>> = params
        .trans
        .iter()
        .map(|row| row.iter().map(|p| p.ln()).collect())
        .collect();

    let mut delta: Vec<f64> = (0..k)
        .map(|s| {
            let (t, c) = obs.get(0);
            params.pi[s].ln() + params.emission_loglik(t, c, s)
        })
        .collect();
    if delta.iter().all(|d| *d == f64::NEG_INFINITY) {
        return Err(Error::ImpossibleObservation { step: 0 });
    }
    let mut back = vec![vec![0usize; k]; n];
    for step in 1..n {
        let (t, c) = obs.get(step);
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for i in 0..k {
                let v = delta[i] + log_a[i][j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            back[step][j] = arg;
            next[j] = best + params.emission_loglik(t, c, j);
        }
        if next.iter().all(|d| *d == f64::NEG_INFINITY) {
            return Err(Error::ImpossibleObservation { step });
        }
        delta = next;
    }

    let (mut state, mut best) = (0, f64::NEG_INFINITY);
    for (s, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            state = s;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = state;
    for step in (1..n).rev() {
        state = back[step][state];
        path[step - 1] = state;
    }
    Ok((path, best))
}

/// Per-step argmax of the posterior marginals (lowest index on ties).
pub fn posterior_decode(post: &PosteriorMarginals) -> Vec<usize> {
    post.gamma.iter().map(|g| argmax(g)).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(AIC, BIC)` for a fitted model over `n_steps` total observed years.
pub fn information_criteria(loglik: f64, k: usize, n_steps: usize) -> (f64, f64) {
    let p = ((k - 1) + k * (k - 1) + 2 * k) as f64;
    (2.0 * p - 2.0 * loglik, p * (n_steps as f64).ln() - 2.0 * loglik)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub k: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of starts for seeded initialisation; the best final
    /// log-likelihood wins. Ignored when explicit initial parameters are given.
    pub restarts: usize,
    pub seed: u64,
    /// Extra key separating restart streams of different fits (e.g. a cell id).
    pub stream: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            k: 3,
            tol: 1e-6,
            max_iter: 500,
            restarts: 10,
            seed: 0,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum FitInit {
    Params(HmmParams),
    Seeded,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Canonically ordered.
    pub params: HmmParams,
    /// Log-likelihood at every E-step of the winning start.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

#[derive(Debug, Clone)]
struct SuffStats {
    loglik: f64,
    first: Vec<f64>,
    trans: Matrix,
    occupancy: Vec<f64>,
    t_sum: Vec<f64>,
    c_sum: Vec<f64>,
}

impl SuffStats {
    fn zeros(k: usize) -> Self {
        SuffStats {
            loglik: 0.0,
            first: vec![0.0; k],
            trans: vec![vec![0.0; k]; k],
            occupancy: vec![0.0; k],
            t_sum: vec![0.0; k],
            c_sum: vec![0.0; k],
        }
    }

    fn of(params: &HmmParams, obs: &ObservationSequence) -> Result<Self> {
        let post = forward_backward(params, obs)?;
        let k = params.k();
        let mut s = SuffStats::zeros(k);
        s.loglik = post.loglik;
        s.first.copy_from_slice(&post.gamma[0]);
        for (step, g) in post.gamma.iter().enumerate() {
            let (t, c) = obs.get(step);
            for state in 0..k {
                s.occupancy[state] += g[state];
                s.t_sum[state] += g[state] * t as f64;
                s.c_sum[state] += g[state] * c as f64;
            }
        }
        for m in &post.xi {
            for i in 0..k {
                for j in 0..k {
                    s.trans[i][j] += m[i][j];
                }
            }
        }
        Ok(s)
    }

    fn absorb(&mut self, other: &SuffStats) {
        self.loglik += other.loglik;
        let k = self.first.len();
        for i in 0..k {
            self.first[i] += other.first[i];
            self.occupancy[i] += other.occupancy[i];
            self.t_sum[i] += other.t_sum[i];
            self.c_sum[i] += other.c_sum[i];
            for j in 0..k {
                self.trans[i][j] += other.trans[i][j];
            }
        }
    }
}

/// Expected sufficient statistics summed over sequences. Per-sequence work is
/// parallel; the reduction runs in sequence order so the result does not
/// depend on the thread count.
fn e_step(params: &HmmParams, obs_set: &[ObservationSequence]) -> Result<SuffStats> {
    let parts: Vec<SuffStats> = obs_set
        .par_iter()
        .map(|o| SuffStats::of(params, o))
        .collect::<Result<_>>()?;
    let mut total = SuffStats::zeros(params.k());
    for p in &parts {
        total.absorb(p);
    }
    Ok(total)
}

/// Closed-form M-step shared by Baum-Welch and Monte-Carlo EM. `first`,
/// `trans` and `occupancy` may be expected or sampled counts.
pub(crate) fn m_step(
    prev: &HmmParams,
    first: &[f64],
    trans: &Matrix,
    occupancy: &[f64],
    t_sum: &[f64],
    c_sum: &[f64],
    warnings: &mut Vec<String>,
) -> HmmParams {
    let k = prev.k();
    let n_first: f64 = first.iter().sum();
    let pi = if n_first > 0.0 {
        first.iter().map(|x| x / n_first).collect()
    } else {
        prev.pi.clone()
    };
    let trans = (0..k)
        .map(|i| {
            let row_sum: f64 = trans[i].iter().sum();
            if row_sum > 0.0 {
                trans[i].iter().map(|x| x / row_sum).collect()
            } else {
                prev.trans[i].clone()
            }
        })
        .collect();
    let mut rate_t = vec![0.0; k];
    let mut rate_c = vec![0.0; k];
    for s in 0..k {
        if occupancy[s] < 1e-12 {
            let msg = format!("state {s} has no responsibility; rates floored at {RATE_FLOOR}");
            log::warn!("{msg}");
            warnings.push(msg);
            rate_t[s] = RATE_FLOOR;
            rate_c[s] = RATE_FLOOR;
        } else {
            rate_t[s] = (t_sum[s] / occupancy[s]).max(RATE_FLOOR);
            rate_c[s] = (c_sum[s] / occupancy[s]).max(RATE_FLOOR);
        }
    }
    HmmParams { pi, trans, rate_t, rate_c }
}

/// Initial parameters from a quantile split of all observations ordered by
/// smoothed terror share: group `g` of `K` seeds state `g`'s rates.
pub fn quantile_init(obs_set: &[ObservationSequence], k: usize) -> HmmParams {
    let mut points: Vec<(u32, u32)> = obs_set
        .iter()
        .flat_map(|o| o.t_counts().iter().copied().zip(o.c_counts().iter().copied()))
        .collect();
    let share = |&(t, c): &(u32, u32)| (t as f64 + 0.5) / (t as f64 + c as f64 + 1.0);
    points.sort_by(|a, b| share(b).total_cmp(&share(a)).then((b.0 + b.1).cmp(&(a.0 + a.1))));
    let n = points.len();
    let mean = |pts: &[(u32, u32)]| {
        let m = pts.len().max(1) as f64;
        (
            pts.iter().map(|p| p.0 as f64).sum::<f64>() / m,
            pts.iter().map(|p| p.1 as f64).sum::<f64>() / m,
        )
    };
    let global = mean(&points);
    let (mut rate_t, mut rate_c) = (Vec::with_capacity(k), Vec::with_capacity(k));
    for g in 0..k {
        let group = &points[g * n / k..(g + 1) * n / k];
        let (t, c) = if group.is_empty() { global } else { mean(group) };
        rate_t.push(t.max(RATE_FLOOR));
        rate_c.push(c.max(RATE_FLOOR));
    }
    HmmParams {
        pi: vec![1.0 / k as f64; k],
        trans: persistence_matrix(k, if k == 1 { 1.0 } else { 0.8 }),
        rate_t,
        rate_c,
    }
}

fn perturbed_init<R: Rng>(base: &HmmParams, rng: &mut R) -> HmmParams {
    let k = base.k();
    let jitter = |r: f64, rng: &mut R| (r * (rng.random_range(-0.7f64..0.7)).exp()).max(RATE_FLOOR);
    let rate_t = base.rate_t.iter().map(|&r| jitter(r, rng)).collect();
    let rate_c = base.rate_c.iter().map(|&r| jitter(r, rng)).collect();
    let trans = (0..k)
        .map(|i| {
            if k == 1 {
                return vec![1.0];
            }
            let diag = rng.random_range(0.5..0.95);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let off_sum: f64 = (0..k).filter(|&j| j != i).map(|j| w[j]).sum();
            (0..k)
                .map(|j| if j == i { diag } else { (1.0 - diag) * w[j] / off_sum })
                .collect()
        })
        .collect();
    HmmParams {
        pi: vec![1.0 / k as f64; k],
        trans,
        rate_t,
        rate_c,
    }
}

fn run_em(
    obs_set: &[ObservationSequence],
    init: HmmParams,
    opts: &FitOptions,
    warnings: &mut Vec<String>,
) -> Result<(HmmParams, Vec<f64>, bool)> {
    let mut params = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter.max(1) {
        let stats = e_step(&params, obs_set)?;
        if let Some(&prev) = trace.last() {
            let rel = (stats.loglik - prev) / prev.abs().max(f64::MIN_POSITIVE);
            trace.push(stats.loglik);
            if rel < opts.tol {
                converged = true;
                break;
            }
        } else {
            trace.push(stats.loglik);
        }
        params = m_step(
            &params,
            &stats.first,
            &stats.trans,
            &stats.occupancy,
            &stats.t_sum,
            &stats.c_sum,
            warnings,
        );
    }
    if !converged {
        // The last M-step has not been scored yet.
        trace.push(e_step(&params, obs_set)?.loglik);
    }
    Ok((params, trace, converged))
}

/// Baum-Welch maximum-likelihood fit of one model shared by all sequences.
pub fn baum_welch_fit(obs_set: &[ObservationSequence], init: FitInit, opts: &FitOptions) -> Result<FitResult> {
    if obs_set.is_empty() {
        return Err(Error::Empty("observation set".into()));
    }
    if let Some(i) = obs_set.iter().position(|o| o.is_empty()) {
        return Err(Error::Empty(format!("observation sequence {i}")));
    }
    let starts: Vec<HmmParams> = match init {
        FitInit::Params(p) => {
            p.validate()?;
            vec![p]
        }
        FitInit::Seeded => {
            if opts.k == 0 {
                return Err(Error::param("k", "must be at least 1"));
            }
            let base = quantile_init(obs_set, opts.k);
            let mut starts = vec![base.clone()];
            for r in 1..opts.restarts.max(1) {
                let mut rng = rng::stream(opts.seed, &[rng::tag::RESTART, opts.stream, r as u64]);
                starts.push(perturbed_init(&base, &mut rng));
            }
            starts
        }
    };

    let mut best: Option<(HmmParams, Vec<f64>, bool, Vec<String>)> = None;
    for start in starts {
        let mut warnings = Vec::new();
        let (params, trace, converged) = run_em(obs_set, start, opts, &mut warnings)?;
        let ll = *trace.last().unwrap();
        if best.as_ref().is_none_or(|b| ll > *b.1.last().unwrap()) {
            best = Some((params, trace, converged, warnings));
        }
    }
    let (params, trace, converged, warnings) = best.unwrap();
    Ok(FitResult {
        params: params.canonicalize().0,
        trace,
        converged,
        warnings,
    })
}

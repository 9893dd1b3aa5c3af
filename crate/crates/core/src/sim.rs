//! Synthetic ground truth: a spatially correlated hidden control field and
//! the event counts it emits.
//!
//! Year 0 is drawn from the pure Potts prior by Gibbs burn-in. Every later
//! year first moves each cell through the transition matrix, then runs a few
//! within-year Gibbs sweeps whose site conditional is
//! `A[s_prev][k] * exp(beta * n_k)`. Those sweeps are this generator's
//! definition of spatially correlated evolution; they approximate, but are
//! not, a joint space-time sampler.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec, NeighborGraph, Shape};
use crate::hmm::{persistence_matrix, HmmParams};
use crate::hmrf::StateField;
use crate::ingest::{CountPanel, EventRecord, Source, YearRange};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub years: YearRange,
    pub params: HmmParams,
    pub beta: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in_sweeps: usize,
    #[serde(default = "default_within_year")]
    pub within_year_sweeps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_burn_in() -> usize {
    500
}

fn default_within_year() -> usize {
    20
}

/// Fixture parameters: three control levels from terror-dominated to
/// conventional-war-dominated, persistence 0.85.
pub fn default_params() -> HmmParams {
    HmmParams {
        pi: vec![1.0 / 3.0; 3],
        trans: persistence_matrix(3, 0.85),
        rate_t: vec![6.0, 2.0, 0.3],
        rate_c: vec![0.3, 3.0, 6.0],
    }
}

impl SimConfig {
    /// 10 x 10 half-degree cells, 2000-2019, default parameters, beta 0.5.
    pub fn fixture(seed: u64) -> Self {
        SimConfig {
            grid: GridSpec::square(0.0, 0.0, 5.0, 5.0, 0.5),
            years: YearRange { first: 2000, last: 2019 },
            params: default_params(),
            beta: 0.5,
            burn_in_sweeps: default_burn_in(),
            within_year_sweeps: default_within_year(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.params.validate()?;
        YearRange::new(self.years.first, self.years.last)?;
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::param("beta", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub field: StateField,
    pub panel: CountPanel,
}

/// One chromatic Gibbs sweep over a single year's slice of labels. `weights`
/// fills unnormalised probabilities for a cell given the current slice.
fn year_sweep<W>(classes: &[Vec<usize>], labels: &mut [usize], k: usize, key: [u64; 3], seed: u64, weights: W)
where
    W: Fn(usize, &[usize], &mut [f64]) + Sync,
{
    for class in classes {
        let draw = |&cell: &usize| {
            let mut w = vec![0.0; k];
            weights(cell, labels, &mut w);
            let u = rng::uniform(seed, &[key[0], key[1], key[2], cell as u64]);
            rng::categorical(&w, u)
        };
        let new: Vec<usize> = if class.len() >= 256 {
            class.par_iter().map(draw).collect()
        } else {
            class.iter().map(draw).collect()
        };
        for (&cell, s) in class.iter().zip(new) {
            labels[cell] = s;
        }
    }
}

fn potts_weights(graph: &NeighborGraph, beta: f64, cell: usize, labels: &[usize], w: &mut [f64]) {
    w.iter_mut().for_each(|x| *x = 0.0);
    for &n in graph.neighbors(cell) {
        w[labels[n]] += beta;
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    w.iter_mut().for_each(|x| *x = (*x - max).exp());
}

/// Samples the hidden field on `grid` (which must match `config.grid`'s cells).
pub fn simulate_field(config: &SimConfig, grid: &Grid) -> Result<StateField> {
    config.validate()?;
    let k = config.params.k();
    let graph = grid.graph();
    let n_cells = grid.n_cells();
    let n_years = config.years.len();
    let classes = graph.color_classes();
    let seed = config.seed;
    let beta = config.beta;

    let mut slices: Vec<Vec<usize>> = Vec::with_capacity(n_years);
    let mut first: Vec<usize> = (0..n_cells)
        .map(|cell| {
            let u = rng::uniform(seed, &[tag::SIM_FIELD_INIT, cell as u64]);
            ((u * k as f64) as usize).min(k - 1)
        })
        .collect();
    if beta > 0.0 {
        for sweep in 0..config.burn_in_sweeps {
            year_sweep(&classes, &mut first, k, [tag::SIM_SWEEP, 0, sweep as u64], seed, |cell, labels, w| {
                potts_weights(graph, beta, cell, labels, w)
            });
        }
    }
    slices.push(first);

    let trans = &config.params.trans;
    for y in 1..n_years {
        let prev = &slices[y - 1];
        let mut cur: Vec<usize> = (0..n_cells)
            .map(|cell| {
                let u = rng::uniform(seed, &[tag::SIM_TRANSITION, y as u64, cell as u64]);
                rng::categorical(&trans[prev[cell]], u)
            })
            .collect();
        if beta > 0.0 {
            for sweep in 0..config.within_year_sweeps {
                year_sweep(&classes, &mut cur, k, [tag::SIM_SWEEP, y as u64, sweep as u64], seed, |cell, labels, w| {
                    potts_weights(graph, beta, cell, labels, w);
                    for (s, x) in w.iter_mut().enumerate() {
                        *x *= trans[prev[cell]][s];
                    }
                });
            }
        }
        slices.push(cur);
    }

    let paths: Vec<Vec<usize>> = (0..n_cells)
        .map(|cell| slices.iter().map(|s| s[cell]).collect())
        .collect();
    StateField::from_paths(&paths, config.years)
}

/// Independent Poisson counts given the field, one keyed stream per site.
pub fn simulate_counts(field: &StateField, params: &HmmParams, seed: u64) -> Result<CountPanel> {
    params.validate()?;
    if field.max_state() >= params.k() {
        return Err(Error::ShapeMismatch(format!("field uses states beyond K = {}", params.k())));
    }
    let n_years = field.n_years();
    let rows: Vec<(Vec<u32>, Vec<u32>)> = (0..field.n_cells())
        .into_par_iter()
        .map(|cell| {
            (0..n_years)
                .map(|y| {
                    let s = field.get(cell, y);
                    let mut r = rng::stream(seed, &[tag::SIM_COUNTS, cell as u64, y as u64]);
                    (rng::poisson(&mut r, params.rate_t[s]), rng::poisson(&mut r, params.rate_c[s]))
                })
                .unzip()
        })
        .collect();
    let (t, c): (Vec<Vec<u32>>, Vec<Vec<u32>>) = rows.into_iter().unzip();
    CountPanel::from_counts(field.n_cells(), field.years(), t.concat(), c.concat())
}

pub fn simulate(config: &SimConfig) -> Result<(Grid, GroundTruth)> {
    let grid = Grid::build(&config.grid)?;
    let field = simulate_field(config, &grid)?;
    let panel = simulate_counts(&field, &config.params, config.seed)?;
    Ok((grid, GroundTruth { field, panel }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEvent {
    pub lon: f64,
    pub lat: f64,
    pub year: i32,
    pub source: Source,
}

impl PointEvent {
    pub fn to_record(self) -> EventRecord {
        EventRecord {
            lon: self.lon,
            lat: self.lat,
            year: self.year,
            source: self.source,
            category: String::new(),
            target_type: String::new(),
            geo_precision: 1,
        }
    }
}

/// `lon,lat,year,source` rows, readable by the event parser with its default
/// schema. Coordinates use the shortest exact decimal form.
pub fn write_events_csv<W: Write>(events: &[PointEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lon", "lat", "year", "source"])?;
    for e in events {
        w.write_record([e.lon.to_string(), e.lat.to_string(), e.year.to_string(), e.source.as_str().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PointSimulation {
    /// Counts on the reference grid.
    pub fine_panel: CountPanel,
    pub events: Vec<PointEvent>,
    /// One panel per target spec, aggregated from `events`.
    pub panels: Vec<CountPanel>,
}

/// Uniform draw in `[lo, hi)`.
fn within(lo: f64, hi: f64, u: f64) -> f64 {
    let x = lo + u * (hi - lo);
    if x >= hi {
        hi.next_down()
    } else {
        x
    }
}

/// Draws counts on a square reference grid, scatters every event uniformly
/// inside its fine cell, and aggregates the same points to each target spec.
pub fn simulate_point_events(
    reference: &Grid,
    field: &StateField,
    params: &HmmParams,
    targets: &[GridSpec],
    seed: u64,
) -> Result<PointSimulation> {
    if reference.spec().shape != Shape::Square {
        return Err(Error::InvalidGrid("reference grid must be square".into()));
    }
    if field.n_cells() != reference.n_cells() {
        return Err(Error::ShapeMismatch("field does not match the reference grid".into()));
    }
    for t in targets {
        if t.cell_area() <= reference.spec().cell_area() {
            return Err(Error::InvalidGrid(format!(
                "target cell size {} is not coarser than the reference {}",
                t.cell_size,
                reference.spec().cell_size
            )));
        }
    }
    let fine_panel = simulate_counts(field, params, seed)?;
    let years = field.years();
    let per_cell: Vec<Vec<PointEvent>> = (0..reference.n_cells())
        .into_par_iter()
        .map(|cell| {
            let ring = &reference.cells()[cell].ring;
            let (x0, y0, x1, y1) = (ring[0][0], ring[0][1], ring[2][0], ring[2][1]);
            let mut out = Vec::new();
            for yi in 0..years.len() {
                let mut r = rng::stream(seed, &[tag::SIM_SCATTER, cell as u64, yi as u64]);
                for (source, n) in [(Source::Gtd, fine_panel.t(cell, yi)), (Source::Ged, fine_panel.c(cell, yi))] {
                    for _ in 0..n {
                        use rand::Rng;
                        let lon = within(x0, x1, r.random::<f64>());
                        let lat = within(y0, y1, r.random::<f64>());
                        out.push(PointEvent { lon, lat, year: years.year(yi), source });
                    }
                }
            }
            out
        })
        .collect();
    let events: Vec<PointEvent> = per_cell.concat();
    let records: Vec<EventRecord> = events.iter().map(|e| e.to_record()).collect();
    let panels = targets
        .iter()
        .map(|spec| {
            let grid = Grid::build(spec)?;
            Ok(crate::ingest::aggregate(&records, &grid, years).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointSimulation { fine_panel, events, panels })
}

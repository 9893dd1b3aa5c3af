use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Map};
use tercon_core::eval::{self, FineTruth};
use tercon_core::grid::{Neighborhood, Shape};
use tercon_core::hmm::{self, information_criteria, FitInit, Matrix};
use tercon_core::hmrf::{self, read_decoded, FieldPosterior, McemSettings, PottsParams};
use tercon_core::ingest::{self, filter_events, parse_events};
use tercon_core::sim::{self, simulate_point_events, write_events_csv, SimConfig};
use tercon_core::{build_cell_transitions, CountPanel, CovariateTable, Grid, HmmParams, Hmrf, StateField};

use crate::config::{config_error, Config, Decoder, Inputs, Mode};

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn sim_config(cfg: &Config) -> Result<SimConfig> {
    let sim = SimConfig {
        grid: cfg.grid.clone(),
        years: cfg.years,
        params: cfg.model.resolve()?,
        beta: cfg.sim.beta,
        burn_in_sweeps: cfg.sim.burn_in_sweeps,
        within_year_sweeps: cfg.sim.within_year_sweeps,
        seed: cfg.seed,
    };
    sim.validate()?;
    Ok(sim)
}

pub fn simulate(cfg: &Config, out: &Path) -> Result<()> {
    let sim = sim_config(cfg)?;
    let grid = Grid::build(&sim.grid)?;
    let field = sim::simulate_field(&sim, &grid)?;
    let panel = if cfg.sim.points {
        if grid.spec().shape != Shape::Square {
            return Err(config_error("sim.points needs a square grid"));
        }
        let points = simulate_point_events(&grid, &field, &sim.params, &[], sim.seed)?;
        write_events_csv(&points.events, create(out, "events.csv")?)?;
        log::info!("scattered {} point events", points.events.len());
        points.fine_panel
    } else {
        sim::simulate_counts(&field, &sim.params, sim.seed)?
    };
    field.write_csv(create(out, "field.csv")?)?;
    panel.write_csv(create(out, "panel.csv")?)?;
    write_text(out, "params.txt", &sim.params.to_text())?;
    log::info!(
        "simulated {} cells x {} years: {} T and {} C events",
        panel.n_cells(),
        panel.n_years(),
        panel.total_t(),
        panel.total_c()
    );
    Ok(())
}

pub fn ingest(cfg: &Config, out: &Path) -> Result<()> {
    let path = Inputs::require(&cfg.inputs.events, "events")?;
    let grid = Grid::build(&cfg.grid)?;
    let (events, parse) = parse_events(path, &cfg.ingest.schema)?;
    let kept = filter_events(&events, &cfg.ingest.policy);
    let (panel, skips) = ingest::aggregate(&kept, &grid, cfg.years);
    panel.write_csv(create(out, "panel.csv")?)?;

    let mut r = String::new();
    writeln!(r, "rows read: {}", parse.rows_read)?;
    writeln!(r, "rows rejected as malformed: {}", parse.errors.len())?;
    for e in &parse.errors {
        writeln!(r, "  row {}: {}", e.row, e.message)?;
    }
    writeln!(r, "events removed by filter policy: {}", events.len() - kept.len())?;
    writeln!(r, "outside grid: {} T, {} C", skips.outside_grid_gtd, skips.outside_grid_ged)?;
    writeln!(r, "outside years: {} T, {} C", skips.outside_years_gtd, skips.outside_years_ged)?;
    writeln!(r, "aggregated: {} T, {} C", panel.total_t(), panel.total_c())?;
    write_text(out, "ingest_report.txt", &r)?;
    if !parse.errors.is_empty() {
        log::warn!("{} malformed rows skipped; see ingest_report.txt", parse.errors.len());
    }
    Ok(())
}

struct Covariates {
    table: CovariateTable,
    specs: Vec<tercon_core::PerturbationSpec>,
}

fn load_covariates(cfg: &Config, n_cells: usize) -> Result<Option<Covariates>> {
    let Some(path) = &cfg.covariates.table else {
        if !cfg.covariates.perturbations.is_empty() {
            return Err(config_error("covariates.perturbations given without covariates.table"));
        }
        return Ok(None);
    };
    let (table, warnings) = CovariateTable::read_csv(open(path)?, n_cells)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(Some(Covariates {
        table,
        specs: cfg.covariates.perturbations.clone(),
    }))
}

fn cell_transitions(cov: &Option<Covariates>, trans: &Matrix, warnings: &mut Vec<String>) -> Result<Option<Vec<Matrix>>> {
    Ok(match cov {
        Some(c) => {
            let (mats, w) = build_cell_transitions(trans, &c.table, &c.specs)?;
            warnings.extend(w);
            Some(mats)
        }
        None => None,
    })
}

struct FitOutput {
    params: HmmParams,
    posterior: FieldPosterior,
    decoded: StateField,
    trace: Vec<f64>,
    report: String,
}

pub fn fit(cfg: &Config, out: &Path) -> Result<()> {
    let path = Inputs::require(&cfg.inputs.panel, "panel")?;
    let panel = CountPanel::load(path)?;
    let opts = cfg.fit.options(cfg.seed)?;
    let decoder = cfg.fit.decoder()?;
    let cov = load_covariates(cfg, panel.n_cells())?;

    let result = match cfg.fit.mode {
        Mode::Independent => fit_independent(cfg, &panel, &opts, decoder, &cov)?,
        Mode::Coupled => fit_coupled(cfg, &panel, &opts, decoder, &cov)?,
    };

    write_text(out, "params.txt", &result.params.to_text())?;
    result.posterior.write_csv(&result.decoded, create(out, "decoded.csv")?)?;
    let mut trace = String::from("iteration,value\n");
    for (i, v) in result.trace.iter().enumerate() {
        writeln!(trace, "{i},{v}")?;
    }
    write_text(out, "trace.csv", &trace)?;
    write_text(out, "fit_report.txt", &result.report)?;
    Ok(())
}

fn fit_independent(
    cfg: &Config,
    panel: &CountPanel,
    opts: &hmm::FitOptions,
    decoder: Decoder,
    cov: &Option<Covariates>,
) -> Result<FitOutput> {
    let fitted = hmm::baum_welch_fit(&panel.sequences(), FitInit::Seeded, opts)?;
    let mut warnings = fitted.warnings.clone();
    let mats = cell_transitions(cov, &fitted.params.trans, &mut warnings)?;
    let (posterior, viterbi) = hmrf::independent_decode(&fitted.params, panel, mats.as_deref())?;
    let decoded = match decoder {
        Decoder::Viterbi => viterbi,
        _ => posterior.mode(),
    };
    let n_steps = panel.n_cells() * panel.n_years();
    let (aic, bic) = information_criteria(fitted.loglik(), cfg.fit.k, n_steps);
    let mut r = String::new();
    writeln!(r, "mode: independent")?;
    writeln!(r, "states: {}", cfg.fit.k)?;
    writeln!(r, "log-likelihood: {}", fitted.loglik())?;
    writeln!(r, "AIC: {aic}")?;
    writeln!(r, "BIC: {bic}")?;
    writeln!(r, "EM iterations: {}", fitted.trace.len())?;
    writeln!(r, "converged: {}", fitted.converged)?;
    for w in &warnings {
        writeln!(r, "warning: {w}")?;
    }
    Ok(FitOutput {
        params: fitted.params,
        posterior,
        decoded,
        trace: fitted.trace,
        report: r,
    })
}

fn fit_coupled(
    cfg: &Config,
    panel: &CountPanel,
    opts: &hmm::FitOptions,
    decoder: Decoder,
    cov: &Option<Covariates>,
) -> Result<FitOutput> {
    let grid = Grid::build(&cfg.grid)?;
    if grid.n_cells() != panel.n_cells() {
        return Err(config_error(format!(
            "grid has {} cells but the panel has {}",
            grid.n_cells(),
            panel.n_cells()
        )));
    }
    let start = hmm::baum_welch_fit(&panel.sequences(), FitInit::Seeded, opts)?;
    let beta = if cfg.fit.beta_candidates.is_empty() {
        cfg.fit.beta
    } else {
        let (_, viterbi) = hmrf::independent_decode(&start.params, panel, None)?;
        let b = hmrf::estimate_beta(&viterbi, grid.graph(), cfg.fit.k, &cfg.fit.beta_candidates)?;
        log::info!("pseudo-likelihood beta estimate: {b}");
        b
    };
    let potts = PottsParams::new(beta, grid.graph().clone())?;
    let settings = McemSettings {
        em_iters: cfg.fit.em_iters,
        gibbs: cfg.fit.gibbs,
    };
    let covariates = cov.as_ref().map(|c| (&c.table, c.specs.as_slice()));
    let fitted = hmrf::mcem_fit(panel, &potts, FitInit::Params(start.params), opts, &settings, covariates, cfg.seed)?;
    let mut warnings = start.warnings;
    warnings.extend(fitted.warnings.iter().cloned());

    let decoded = match decoder {
        Decoder::Icm => {
            let mats = cell_transitions(cov, &fitted.params.trans, &mut Vec::new())?;
            let model = Hmrf::with_cell_transitions(&fitted.params, &potts, panel, mats.as_deref())?;
            let icm = model.icm_decode(&fitted.decoded, cfg.fit.icm_sweeps)?;
            if !icm.converged {
                warnings.push(format!("ICM stopped after {} sweeps without converging", icm.sweeps));
            }
            icm.field
        }
        _ => fitted.decoded.clone(),
    };
    let mut r = String::new();
    writeln!(r, "mode: coupled")?;
    writeln!(r, "states: {}", cfg.fit.k)?;
    writeln!(r, "beta: {beta}")?;
    writeln!(r, "MCEM iterations: {}", cfg.fit.em_iters)?;
    writeln!(r, "retained samples per E-step: {}", cfg.fit.gibbs.retained())?;
    if let Some(last) = fitted.trace.last() {
        writeln!(r, "final mean complete-data log-score: {last}")?;
    }
    for w in &warnings {
        writeln!(r, "warning: {w}")?;
    }
    Ok(FitOutput {
        params: fitted.params,
        posterior: fitted.posterior,
        decoded,
        trace: fitted.trace,
        report: r,
    })
}

pub fn sweep(cfg: &Config, out: &Path) -> Result<()> {
    let reference = cfg.grid.with_cell_size(cfg.sweep.reference_cell_size);
    if reference.shape != Shape::Square {
        return Err(config_error("the sweep reference grid must be square"));
    }
    let sim = SimConfig {
        grid: reference,
        ..sim_config(cfg)?
    };
    let grid = Grid::build(&sim.grid)?;
    let field = sim::simulate_field(&sim, &grid)?;
    let points = simulate_point_events(&grid, &field, &sim.params, &[], sim.seed)?;
    let fine = FineTruth {
        grid,
        field,
        events: points.events,
        k: sim.params.k(),
    };
    let targets: Vec<_> = cfg
        .sweep
        .targets
        .iter()
        .map(|t| {
            let mut spec = cfg.grid.with_cell_size(t.cell_size);
            spec.shape = t.shape;
            if t.shape == Shape::Hex {
                spec.neighborhood = Neighborhood::Rook;
            }
            spec.validate().map(|_| spec)
        })
        .collect::<tercon_core::Result<_>>()?;
    let opts = cfg.fit.options(cfg.seed)?;
    let result = eval::resolution_sweep(&fine, &targets, &opts)?;
    result.write_csv(create(out, "sweep.csv")?)?;
    write_text(out, "sweep_summary.txt", &result.summary())?;
    Ok(())
}

pub fn export_geojson(cfg: &Config, out: &Path) -> Result<()> {
    let path = Inputs::require(&cfg.inputs.field, "field")?;
    let grid = Grid::build(&cfg.grid)?;
    let (field, posterior) = read_decoded(open(path)?)?;
    if field.n_cells() != grid.n_cells() {
        return Err(config_error(format!(
            "grid has {} cells but the field has {}",
            grid.n_cells(),
            field.n_cells()
        )));
    }
    let year = cfg.export.year.unwrap_or(field.years().first);
    let yi = field
        .years()
        .index_of(year)
        .ok_or_else(|| config_error(format!("export.year {year} is outside the field's years")))?;
    let doc = grid.to_geojson(|id| {
        let mut props = Map::new();
        props.insert("year".into(), json!(year));
        props.insert("state".into(), json!(field.get(id.index(), yi)));
        if let Some(p) = &posterior {
            for (s, v) in p.marginal(id.index(), yi).iter().enumerate() {
                props.insert(format!("p_{s}"), json!(v));
            }
        }
        props
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_text(out, "map.geojson", &text)
}

pub fn evaluate(cfg: &Config, out: &Path) -> Result<()> {
    let decoded_path = Inputs::require(&cfg.inputs.decoded, "decoded")?;
    let truth_path = Inputs::require(&cfg.inputs.truth, "truth")?;
    let (decoded, posterior) = read_decoded(open(decoded_path)?)?;
    let (truth, _) = read_decoded(open(truth_path)?)?;
    let k = posterior.as_ref().map_or(0, |p| p.k());
    let mut report = eval::score(&decoded, posterior.as_ref(), &truth, k)?;
    match (&cfg.inputs.params, &cfg.inputs.true_params) {
        (Some(fitted), Some(true_params)) => {
            let read = |p: &Path| -> Result<HmmParams> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(HmmParams::from_text(&text)?)
            };
            report = report.with_rate_errors(&read(fitted)?, &read(true_params)?);
        }
        (None, None) => {}
        _ => return Err(config_error("rate errors need both inputs.params and inputs.true_params")),
    }
    report.write_csv(create(out, "eval.csv")?)?;
    write_text(out, "eval.txt", &report.summary())
}

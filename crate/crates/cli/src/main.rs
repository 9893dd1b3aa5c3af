//! `tercon`: simulate, ingest, fit, sweep, map and score territorial
//! control estimates.
//!
//! Every run writes `manifest.toml` next to its outputs. Feeding that file
//! back through `--config` with a fresh `--out` reproduces the outputs byte
//! for byte.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Config, ConfigError, Decoder, Mode};

#[derive(Parser)]
#[command(name = "tercon", version, about = "Territorial control estimation from event counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration (or a manifest from an earlier run).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores. Outputs do not depend
    /// on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a hidden control field and its event counts.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write point events (`events.csv`).
        #[arg(long)]
        points: bool,
    },
    /// Parse, filter and grid an event CSV into a count panel.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Fit the independent or coupled model to a count panel and decode it.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        panel: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Number of hidden states.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_parser = parse_decoder)]
        decoder: Option<Decoder>,
        /// Covariate table CSV.
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Score decoding accuracy across cell sizes and shapes on simulated data.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write one year of a decoded field as GeoJSON polygons.
    ExportGeojson {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        year: Option<i32>,
    },
    /// Compare a decoded field with the true one.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        decoded: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        true_params: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "independent" => Ok(Mode::Independent),
        "coupled" => Ok(Mode::Coupled),
        _ => Err(format!("expected `independent` or `coupled`, got `{s}`")),
    }
}

fn parse_decoder(s: &str) -> std::result::Result<Decoder, String> {
    match s {
        "viterbi" => Ok(Decoder::Viterbi),
        "mode" => Ok(Decoder::Mode),
        "icm" => Ok(Decoder::Icm),
        _ => Err(format!("expected `viterbi`, `mode` or `icm`, got `{s}`")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn prepare(common: &Common) -> Result<Config> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(config::config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = Config::load(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (name, common, cfg) = match cli.command {
        Command::Simulate { common, points } => {
            let mut cfg = prepare(&common)?;
            cfg.sim.points |= points;
            ("simulate", common, cfg)
        }
        Command::Ingest { common, events } => {
            let mut cfg = prepare(&common)?;
            set_opt(&mut cfg.inputs.events, events);
            ("ingest", common, cfg)
        }
        Command::Fit {
            common,
            panel,
            mode,
            k,
            beta,
            decoder,
            covariates,
        } => {
            let mut cfg = prepare(&common)?;
            set_opt(&mut cfg.inputs.panel, panel);
            set(&mut cfg.fit.mode, mode);
            set(&mut cfg.fit.k, k);
            set(&mut cfg.fit.beta, beta);
            set_opt(&mut cfg.fit.decoder, decoder);
            set_opt(&mut cfg.covariates.table, covariates);
            ("fit", common, cfg)
        }
        Command::Sweep { common } => {
            let cfg = prepare(&common)?;
            ("sweep", common, cfg)
        }
        Command::ExportGeojson { common, field, year } => {
            let mut cfg = prepare(&common)?;
            set_opt(&mut cfg.inputs.field, field);
            set_opt(&mut cfg.export.year, year);
            ("export-geojson", common, cfg)
        }
        Command::Evaluate {
            common,
            decoded,
            truth,
            params,
            true_params,
        } => {
            let mut cfg = prepare(&common)?;
            set_opt(&mut cfg.inputs.decoded, decoded);
            set_opt(&mut cfg.inputs.truth, truth);
            set_opt(&mut cfg.inputs.params, params);
            set_opt(&mut cfg.inputs.true_params, true_params);
            ("evaluate", common, cfg)
        }
    };
    execute(name, cfg, &common.out)
}

fn execute(name: &str, mut cfg: Config, out: &Path) -> Result<()> {
    cfg.absolutize()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    log::info!("{name}: writing to {}", out.display());
    match name {
        "simulate" => commands::simulate(&cfg, out)?,
        "ingest" => commands::ingest(&cfg, out)?,
        "fit" => commands::fit(&cfg, out)?,
        "sweep" => commands::sweep(&cfg, out)?,
        "export-geojson" => commands::export_geojson(&cfg, out)?,
        "evaluate" => commands::evaluate(&cfg, out)?,
        _ => unreachable!("unknown command {name}"),
    }
    let manifest = cfg.manifest(name)?;
    std::fs::write(out.join("manifest.toml"), manifest).context("writing manifest.toml")
}

/// 2 for configuration problems, 3 for bad or unreadable data.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tercon_core::Error>() {
            return if e.is_config_error() { 2 } else { 3 };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

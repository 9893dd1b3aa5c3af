//! Run configuration: a TOML file whose every key has a default, so an empty
//! file (or none at all) describes the built-in fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tercon_core::grid::Shape;
use tercon_core::hmm::{persistence_matrix, Matrix};
use tercon_core::hmrf::GibbsSettings;
use tercon_core::sim::default_params;
use tercon_core::{FilterPolicy, FitOptions, GridSpec, HmmParams, PerturbationSpec, Schema, YearRange};

/// A problem with the configuration or command line rather than the data.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub grid: GridSpec,
    pub years: YearRange,
    pub model: ModelConfig,
    pub sim: SimSection,
    pub fit: FitSection,
    pub ingest: IngestSection,
    pub sweep: SweepSection,
    pub covariates: CovariateSection,
    pub export: ExportSection,
    pub inputs: Inputs,
    /// Present only in manifests; ignored when read back.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            grid: GridSpec::square(0.0, 0.0, 5.0, 5.0, 0.5),
            years: YearRange { first: 2000, last: 2019 },
            model: ModelConfig::default(),
            sim: SimSection::default(),
            fit: FitSection::default(),
            ingest: IngestSection::default(),
            sweep: SweepSection::default(),
            covariates: CovariateSection::default(),
            export: ExportSection::default(),
            inputs: Inputs::default(),
            run: None,
        }
    }
}

/// Generating parameters for simulation. Unset vectors fall back to the
/// three-state fixture when `k = 3`, or to evenly spaced rates otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k: usize,
    pub persistence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trans: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_t: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_c: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            persistence: 0.85,
            pi: None,
            trans: None,
            rate_t: None,
            rate_c: None,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self) -> Result<HmmParams> {
        let k = self.k;
        if k == 0 {
            return Err(config_error("model.k must be at least 1"));
        }
        let spaced = |from: f64, to: f64| -> Vec<f64> {
            if k == 1 {
                return vec![(from + to) / 2.0];
            }
            (0..k).map(|i| (from * (k - 1 - i) as f64 + to * i as f64) / (k - 1) as f64).collect()
        };
        let defaults = default_params();
        let (dt, dc) = if k == 3 {
            (defaults.rate_t, defaults.rate_c)
        } else {
            (spaced(6.0, 0.3), spaced(0.3, 6.0))
        };
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != k {
                return Err(config_error(format!("model.{name} must have k = {k} entries, found {}", v.len())));
            }
            Ok(())
        };
        let pi = self.pi.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
        check("pi", &pi)?;
        let trans = self.trans.clone().unwrap_or_else(|| persistence_matrix(k, self.persistence));
        if trans.len() != k || trans.iter().any(|row| row.len() != k) {
            return Err(config_error(format!("model.trans must be a {k} x {k} matrix")));
        }
        let rate_t = self.rate_t.clone().unwrap_or(dt);
        check("rate_t", &rate_t)?;
        let rate_c = self.rate_c.clone().unwrap_or(dc);
        check("rate_c", &rate_c)?;
        Ok(HmmParams::new(pi, trans, rate_t, rate_c)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub beta: f64,
    pub burn_in_sweeps: usize,
    pub within_year_sweeps: usize,
    /// Also scatter every count as a point event and write `events.csv`.
    pub points: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            beta: 0.5,
            burn_in_sweeps: 500,
            within_year_sweeps: 20,
            points: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Independent,
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoder {
    /// Most likely path per cell (independent mode only).
    Viterbi,
    /// Marginal posterior mode per site.
    Mode,
    /// Iterated conditional modes from the posterior mode (coupled only).
    Icm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub mode: Mode,
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    /// Potts coupling for coupled mode.
    pub beta: f64,
    /// When non-empty, beta is chosen from these by pseudo-likelihood on the
    /// independent Viterbi field, overriding `beta`.
    pub beta_candidates: Vec<f64>,
    /// Defaults to `viterbi` for independent and `mode` for coupled fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<Decoder>,
    pub em_iters: usize,
    pub gibbs: GibbsSettings,
    pub icm_sweeps: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitOptions::default();
        FitSection {
            mode: Mode::Independent,
            k: f.k,
            tol: f.tol,
            max_iter: f.max_iter,
            restarts: f.restarts,
            beta: 0.5,
            beta_candidates: Vec::new(),
            decoder: None,
            em_iters: 20,
            gibbs: GibbsSettings::default(),
            icm_sweeps: 100,
        }
    }
}

impl FitSection {
    pub fn options(&self, seed: u64) -> Result<FitOptions> {
        if self.k == 0 {
            return Err(config_error("fit.k must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(config_error("fit.restarts must be at least 1"));
        }
        Ok(FitOptions {
            k: self.k,
            tol: self.tol,
            max_iter: self.max_iter,
            restarts: self.restarts,
            seed,
            stream: 0,
        })
    }

    pub fn decoder(&self) -> Result<Decoder> {
        match (self.mode, self.decoder) {
            (Mode::Independent, None) => Ok(Decoder::Viterbi),
            (Mode::Coupled, None) => Ok(Decoder::Mode),
            (Mode::Independent, Some(Decoder::Icm)) => Err(config_error("fit.decoder `icm` needs mode = coupled")),
            (Mode::Coupled, Some(Decoder::Viterbi)) => {
                Err(config_error("fit.decoder `viterbi` needs mode = independent"))
            }
            (_, Some(d)) => Ok(d),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub schema: Schema,
    pub policy: FilterPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub cell_size: f64,
    #[serde(default)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Cell size of the fine square grid the truth is simulated on.
    pub reference_cell_size: f64,
    pub targets: Vec<Target>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let hex = GridSpec::hex_size_matching_square(0.5);
        SweepSection {
            reference_cell_size: 0.125,
            targets: vec![
                Target { cell_size: 0.25, shape: Shape::Square },
                Target { cell_size: 0.5, shape: Shape::Square },
                Target { cell_size: 1.0, shape: Shape::Square },
                Target { cell_size: hex, shape: Shape::Hex },
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSection {
    /// Long-format `cell_id,name,value` CSV.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    pub perturbations: Vec<PerturbationSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    /// Year to map; the first year when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

/// Input files. Relative paths are resolved against the working directory
/// and stored absolute in the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    /// Decoded or true field to map.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// Fitted parameters, for rate errors in `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_params: Option<PathBuf>,
}

impl Inputs {
    fn slots_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 7] {
        [
            ("events", &mut self.events),
            ("panel", &mut self.panel),
            ("field", &mut self.field),
            ("decoded", &mut self.decoded),
            ("truth", &mut self.truth),
            ("params", &mut self.params),
            ("true_params", &mut self.true_params),
        ]
    }

    pub fn require<'a>(slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        slot.as_deref()
            .ok_or_else(|| config_error(format!("missing input: set inputs.{name} or pass --{}", name.replace('_', "-"))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    /// SHA-256 of the resolved configuration above, without this table.
    pub config_sha256: String,
    /// SHA-256 of every input file read.
    pub inputs_sha256: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("reading config {}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))?;
        cfg.run = None;
        Ok(cfg)
    }

    /// Makes every input path absolute so the manifest works from any
    /// directory.
    pub fn absolutize(&mut self) -> Result<()> {
        let cwd = std::env::current_dir()?;
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = cwd.join(&*path);
                }
            }
        };
        for (_, slot) in self.inputs.slots_mut() {
            fix(slot);
        }
        fix(&mut self.covariates.table);
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising configuration")
    }

    /// The resolved configuration plus a `[run]` table.
    pub fn manifest(&self, command: &str) -> Result<String> {
        let mut bare = self.clone();
        bare.run = None;
        let text = bare.to_toml()?;
        let mut inputs_sha256 = BTreeMap::new();
        let mut paths: Vec<(String, PathBuf)> = Vec::new();
        for (name, slot) in bare.inputs.slots_mut() {
            if let Some(p) = slot {
                paths.push((name.to_string(), p.clone()));
            }
        }
        if let Some(p) = &bare.covariates.table {
            paths.push(("covariates".into(), p.clone()));
        }
        for (name, p) in paths {
            let bytes = std::fs::read(&p).with_context(|| format!("hashing input {}", p.display()))?;
            inputs_sha256.insert(name, sha256_hex(&bytes));
        }
        bare.run = Some(RunInfo {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(text.as_bytes()),
            inputs_sha256,
        });
        bare.to_toml()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite coordinate ({lon}, {lat})")]
    NonFiniteCoordinate { lon: f64, lat: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("observation at step {step} is impossible under every state")]
    ImpossibleObservation { step: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("malformed input {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::InvalidParameter { .. }
                | Error::MissingColumn(_)
                | Error::UnknownCovariate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

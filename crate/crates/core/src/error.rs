use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("input {0:?} is not covered by any region")]
    Uncovered(Vec<f64>),

    #[error("non-finite training loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("ingestion failed for {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArchitecture(_) => "invalid_architecture",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::InvalidInput(_) => "invalid_input",
            Error::Uncovered(_) => "uncovered_input",
            Error::NonFinite { .. } => "non_finite",
            Error::Ingest { .. } => "ingest",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn shape_err(what: &str, expected: usize, got: usize) -> Error {
    Error::Shape(format!("{what}: expected {expected}, got {got}"))
}

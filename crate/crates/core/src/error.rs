use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedbmError>;

#[derive(Debug, Error)]
pub enum FedbmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("variance needs at least two embeddings per class, got {0}")]
    VarianceInfeasible(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called with a cache from a different parameter state")]
    StaleCache,

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error(
        "dirichlet partition failed after {attempts} attempts (clients={clients}, beta={beta})"
    )]
    PartitionExhausted {
        attempts: usize,
        clients: usize,
        beta: f64,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FedbmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        FedbmError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

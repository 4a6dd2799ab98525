use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the anonymization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("speaker `{speaker}` has {available} utterances, needs more than {required}")]
    InsufficientUtterances {
        speaker: String,
        available: usize,
        required: usize,
    },

    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("label index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("eps must be positive")]
    NonPositiveEps,

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("trial construction: {0}")]
    Trials(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

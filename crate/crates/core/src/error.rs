//! Error type shared across the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("schema violation in `{field}`: {message}")]
    SchemaViolation { field: String, message: String },

    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),

    #[error("unreadable image for view {view} at `{path}`: {message}")]
    UnreadableImage {
        view: String,
        path: PathBuf,
        message: String,
    },

    #[error("class `{label}` has {count} subjects, fewer than k = {k}")]
    TooFewSubjectsInClass {
        label: String,
        count: usize,
        k: usize,
    },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("weights unavailable for backbone `{name}`: {message}")]
    PretrainedWeightsUnavailable { name: String, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class `{0}` missing from training set")]
    EmptyClass(String),

    #[error("non-finite loss at epoch {epoch}: {details}")]
    NonFiniteLoss { epoch: usize, details: String },

    #[error("degenerate labels: need at least one positive and one negative unit")]
    DegenerateLabels,

    #[error("empty confusion matrix")]
    EmptyMatrix,

    #[error(
        "no integer confusion matrix reproduces the rates within ±{tolerance} \
         (sensitivity off by {sens_residual:.6}, specificity off by {spec_residual:.6})"
    )]
    InfeasibleRates {
        tolerance: f64,
        sens_residual: f64,
        spec_residual: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O failure at `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("JSON error in `{path}`: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::SchemaViolation {
            field: field.into(),
            message: message.into(),
        }
    }
}

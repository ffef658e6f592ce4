use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

/// A validation problem attached to one feature of an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub feature: String,
    pub message: String,
}

impl FieldError {
    pub fn new(feature: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            feature: feature.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema: {0}")]
    Schema(String),

    #[error("row {row}, column '{column}': {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("instance does not conform to schema ({} field error(s))", .0.len())]
    InvalidInstance(Vec<FieldError>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training set contains a single class")]
    SingleClass,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("no point in the pool is labeled with contrast class {0}")]
    NoContrastClass(usize),

    #[error("no contrast leaf is reachable under the feature constraints")]
    NoPath,

    #[error("rule on feature '{0}' cannot be realized inside its feasible range")]
    InfeasibleRealization(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("remote model: {0}")]
    Remote(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

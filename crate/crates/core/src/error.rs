use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum GcrError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{count} duplicate (user, item) pair(s), first at line {first_line}")]
    DuplicatePairs { count: usize, first_line: usize },

    #[error("no interactions")]
    NoInteractions,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: String, hint: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GcrError> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> GcrError {
    GcrError::Shape(msg.into())
}

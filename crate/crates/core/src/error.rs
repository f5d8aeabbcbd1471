use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("auc undefined: need at least one positive and one negative")]
    SingleClass,

    #[error("no domain has both classes")]
    NoScorableDomain,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("{path}: {source}")]
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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

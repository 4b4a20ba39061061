use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid bundle: {0}")]
    Bundle(String),

    #[error("degenerate row {row} in {matrix} (norm {norm:e})")]
    DegenerateRow { matrix: String, row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: String,
    },

    #[error("class index {index} out of range for {n_classes} classes")]
    ClassOutOfRange { index: usize, n_classes: usize },

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("missing anchor {0}")]
    MissingAnchor(&'static str),

    #[error("missing gap for pair ({0}, {1})")]
    MissingGap(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    /// True for bad inputs or arguments; false for environment failures such as i/o.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

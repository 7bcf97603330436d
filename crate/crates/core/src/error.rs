use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AmdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,

    #[error("non-finite value in {context} at coordinate {coordinate}")]
    NonFinite { context: String, coordinate: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AmdError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AmdError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        AmdError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AmdError::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmdError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numbers going bad rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            AmdError::NonFinite { .. } | AmdError::NonFiniteGradient(_) | AmdError::NonFiniteLoss { .. }
        )
    }
}

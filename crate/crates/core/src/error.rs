//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate tile_id {0:?}")]
    DuplicateTileId(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("counties missing SVI records: {}", .0.join(", "))]
    MissingSvi(Vec<String>),

    #[error("expected {expected}-dimensional embedding, provider returned {got}")]
    Dimensionality { expected: usize, got: usize },

    #[error("non-finite loss at epoch {epoch}: {details}")]
    NonFiniteLoss { epoch: usize, details: String },

    #[error("singular regression system; increase n_samples")]
    SingularSystem,

    #[error("provider error: {0}")]
    Provider(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error on {path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

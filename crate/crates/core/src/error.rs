use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgdsError {
    /// Input outside an operation's domain (bad shape, empty set, invalid parameter).
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation called while a component is in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A loss or activation became NaN/Inf during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

impl PgdsError {
    pub fn domain(msg: impl Into<String>) -> Self {
        PgdsError::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PgdsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PgdsError::Domain(_) => "domain",
            PgdsError::State(_) => "state",
            PgdsError::Parse(_) => "parse",
            PgdsError::Validation(_) => "validation",
            PgdsError::NonFinite(_) => "non_finite",
            PgdsError::Io { .. } => "io",
            PgdsError::Image { .. } => "image",
            PgdsError::Checkpoint(_) => "checkpoint",
        }
    }
}

pub type Result<T, E = PgdsError> = std::result::Result<T, E>;

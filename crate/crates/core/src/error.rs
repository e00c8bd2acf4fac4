use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A dataset or interchange record does not match its schema.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("example {id}: {message}")]
    Validation { id: String, message: String },

    #[error("template registry: {0}")]
    Registry(String),

    #[error("render error for {key}: {message}")]
    Render { key: String, message: String },

    /// Selection budget cannot be computed (empty human rationale under top-var).
    #[error("degenerate input for example {0}: empty human rationale")]
    Degenerate(String),

    #[error("transport error (request {hash}): {message}")]
    Transport { hash: String, message: String },

    #[error("protocol error (request {hash}): {message}")]
    Protocol { hash: String, message: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("attribution alignment error for example {id}: {message}")]
    Alignment { id: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

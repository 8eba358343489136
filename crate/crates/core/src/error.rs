use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in this crate.
///
/// The CLI maps these onto process exit codes: configuration, shape,
/// validation and parse problems are user errors; numeric and state
/// problems are runtime failures; client problems come from external
/// services and are potentially retryable.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at {locus}: {message}")]
    Parse { locus: String, message: String },

    #[error("ingestion failed: {0}")]
    Ingestion(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("external client failed{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Client { message: String, retryable: bool },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(locus: impl Into<String>, message: impl Into<String>) -> Self {
        CoreError::Parse {
            locus: locus.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported wav: {0}")]
    WavFormat(String),

    #[error("malformed wav header: {0}")]
    WavHeader(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    #[error("tensor container: {0}")]
    Container(String),

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("missing enrollment profile for speaker {0}")]
    MissingProfile(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than by the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFiniteLoss { .. })
    }
}

//! Error taxonomy shared by all modules.

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit-code contract: `Argument` and
/// `Config` are usage errors (exit 2), `Format`, `State`, `Io` and
/// `EmptySupport` are data errors (exit 3), `Numeric` is a numeric
/// failure (exit 4).
#[derive(Debug, Error)]
pub enum PriqaError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PriqaError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PriqaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PriqaError>;

use thiserror::Error;

/// Crate-wide error type.
///
/// The two main variants mirror how the CLI reports failures: configuration
/// problems (unknown ids, invalid parameters, malformed input) exit with
/// status 1, numerical problems (singular systems, non-finite values,
/// validation failures) exit with status 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: unknown identifier, parameter outside its
    /// domain, dimension mismatch, malformed input file.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure: non-finite evaluation, singular matrix, sampler
    /// validation failure.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

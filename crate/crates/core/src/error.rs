use thiserror::Error;

/// Errors produced by the estimation pipeline.
///
/// The split between `Input` and `Numerical` is part of the CLI exit-code
/// contract: the former maps to exit code 1, the latter to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("{file}: row {row}: {message}")]
    Schema { file: String, row: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the caller's data or configuration.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Schema { .. } | Error::Domain(_) | Error::Csv(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

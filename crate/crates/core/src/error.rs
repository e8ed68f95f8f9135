use thiserror::Error;

/// Errors raised by data validation, model fitting and the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural contract (ragged columns, bad outcome values, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A configuration value is missing or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("design matrix is rank deficient: column `{column}` is linearly dependent on earlier columns")]
    RankDeficient { column: String },

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Generic numerical failure (non-finite values, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown hospital index {index} (model has {count} hospitals)")]
    UnknownHospital { index: usize, count: usize },

    #[error("I/O error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

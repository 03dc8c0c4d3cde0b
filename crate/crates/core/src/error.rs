use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KronError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KronError {
    #[error("invalid kernel shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv error at row {row}, column {column}: {message}")]
    CsvCell {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("cholesky factorization failed for channel {channel} after {attempts} jitter attempts")]
    Cholesky { channel: usize, attempts: usize },

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("simulation diverged (seed {seed}): {message}")]
    Diverged { seed: u64, message: String },

    #[error("system generation failed after {attempts} attempts (seed {seed})")]
    Generation { seed: u64, attempts: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KronError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KronError::Io {
            path: path.into(),
            source,
        }
    }
}

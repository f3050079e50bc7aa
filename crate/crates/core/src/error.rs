use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigenvalue {index} is not positive: {value}")]
    NonPositiveEigenvalue { index: usize, value: f64 },

    #[error("rotation is not orthogonal (max deviation {deviation:.3e})")]
    NotOrthogonal { deviation: f64 },

    #[error("blocks do not partition 0..{dim}: {reason}")]
    BadPartition { dim: usize, reason: String },

    #[error("SGD diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("ODE integration unstable at t = {t} (state norm {norm:.3e})")]
    Unstable { t: f64, norm: f64 },

    #[error("IDX: {0}")]
    Idx(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("config: missing required key `{0}`")]
    MissingKey(String),

    #[error("config: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("compare: {0}")]
    Compare(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

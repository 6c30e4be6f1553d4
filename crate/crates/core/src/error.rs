use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A data file could not be parsed. `individual` and `time` locate the
    /// offending record when they are known.
    #[error("{}", format_parse(.individual, .time, .message))]
    Parse {
        individual: Option<String>,
        time: Option<usize>,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The normal matrix of the critic could not be factorized.
    #[error("singular critic system at lambda_c = {lambda}; use a positive penalty lambda_c > 0")]
    SingularSystem { lambda: f64 },

    #[error("non-finite objective value at {point:?}")]
    NonFinite { point: Vec<f64> },

    #[error("line search failed at the first step of every restart")]
    LineSearchFailed,

    /// `trace` holds `(λ_a, J, fraction)` for every round that ran.
    #[error("penalty loop did not satisfy the stochasticity constraint within {rounds} rounds")]
    PenaltyRoundsExceeded { rounds: usize, trace: Vec<(f64, f64, f64)> },

    #[error("{0}")]
    Numerical(String),

    #[error("{0}")]
    Unsupported(String),
}

fn format_parse(individual: &Option<String>, time: &Option<usize>, message: &str) -> String {
    match (individual, time) {
        (Some(id), Some(t)) => format!("individual {id}, t = {t}: {message}"),
        (Some(id), None) => format!("individual {id}: {message}"),
        (None, Some(t)) => format!("t = {t}: {message}"),
        (None, None) => message.to_string(),
    }
}

impl Error {
    pub(crate) fn parse(individual: Option<&str>, time: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            individual: individual.map(str::to_string),
            time,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

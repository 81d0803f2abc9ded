use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no ladder rung reaches exponent {target} within {cap} rungs")]
    UnboundedLadder { target: f64, cap: usize },

    #[error("shift {shift} exceeds the admissible limit {limit}")]
    ShiftTooLarge { shift: f64, limit: f64 },

    #[error("shift set is empty")]
    EmptyShiftSet,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("adaptive quadrature did not converge; worst subinterval [{a}, {b}] with error estimate {estimate:e}")]
    Quadrature { a: f64, b: f64, estimate: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

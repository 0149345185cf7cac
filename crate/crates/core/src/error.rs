use thiserror::Error;

use crate::design::DesignViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {}", join_violations(.0))]
    InvalidDesign(Vec<DesignViolation>),

    #[error("invalid contrast: {0}")]
    InvalidContrast(String),

    #[error("invalid outcome table: {0}")]
    InvalidTable(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("{0}")]
    Domain(String),

    /// No PSD matrix with diagonal `M_w^2`, zero row sums and rank `W - 1` exists.
    #[error(
        "no PSD correction matrix exists: largest whole-plot size {largest} must be strictly \
         less than the sum of the others ({rest})"
    )]
    NoCorrectionMatrix { largest: usize, rest: usize },

    #[error("enumeration refused: {count} assignments exceed the guard of {guard}")]
    EnumerationTooLarge { count: u128, guard: u128 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for failures caused by bad input rather than a bug or an I/O fault.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Internal(_) | Error::Io(_))
    }
}

fn join_violations(v: &[DesignViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

use thiserror::Error;

use crate::dump::DumpError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("column {index} has zero norm")]
    ZeroColumn { index: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("columns {i} and {j} violate near-orthogonality: |<u_i,u_j>| = {inner} > {phi}")]
    NearOrthogonality {
        i: usize,
        j: usize,
        inner: f64,
        phi: f64,
    },

    #[error("matrix is rank deficient: rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("covariance model violated: {0}")]
    ModelViolation(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error(transparent)]
    Dump(#[from] DumpError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::Shape { .. }
            | Error::ZeroColumn { .. }
            | Error::NearOrthogonality { .. }
            | Error::Constraint(_) => true,
            Error::Dump(e) => !matches!(e, DumpError::Io(_)),
            _ => false,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

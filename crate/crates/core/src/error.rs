use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("no certified feedback gain on the search grid")]
    EmptyCertifiedInterval,

    #[error("QP solver failed in CCP iteration {iteration}: {status:?}")]
    QpFailure {
        iteration: usize,
        status: crate::qp::QpStatus,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("coordinate ({u}, {v}) outside [0, {max_u}] x [0, {max_v}]")]
    OutOfRange { u: f64, v: f64, max_u: f64, max_v: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no consensus: best model has {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("empty database")]
    EmptyDatabase,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

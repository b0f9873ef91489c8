use thiserror::Error;

use sgq_tensor::TensorError;

#[derive(Debug, Error)]
pub enum SgqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SgqError>;

pub(crate) fn geometry(msg: impl Into<String>) -> SgqError {
    SgqError::Geometry(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> SgqError {
    SgqError::Invalid(msg.into())
}

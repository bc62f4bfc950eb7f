use thiserror::Error;

/// Errors raised by shape validation and graph construction.
///
/// Every shape failure names the operation and both offending shapes so
/// a mis-wired model fails with a diagnostic, not a panic.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batchnorm: inference requested before running statistics were populated")]
    BnStatsUnpopulated,

    #[error("backward: root value must be a scalar, got shape {shape}")]
    NonScalarRoot { shape: String },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

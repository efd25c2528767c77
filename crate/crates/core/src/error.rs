use alloc::string::String;

/// Errors raised by the segmentation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Column lengths or tensor shapes disagree.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    /// The input collapses to a case the operation cannot handle.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A required column or annotation is absent.
    #[error("missing data: {0}")]
    MissingData(String),
    /// An optimizer received a NaN or infinite gradient.
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    /// Stored weights do not match the network configuration.
    #[error("weights do not match network configuration: {0}")]
    WeightsMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdspError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MdspError> = std::result::Result<T, E>;

/// Shorthand for a shape error naming both sides.
pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> MdspError {
    MdspError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

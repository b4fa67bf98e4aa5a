use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps variants onto exit codes: `Usage` → 1, `Io`/`Format` → 2,
/// `Numeric` → 3. Everything else is a programming-contract violation
/// surfaced as `Shape` or `Invalid`.
#[derive(Error, Debug)]
pub enum MorphError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MorphError>;

impl MorphError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MorphError::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        MorphError::Invalid(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        MorphError::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        MorphError::Format(msg.into())
    }
}

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or map shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates its contract.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation precondition failed (invalid depth, empty mask, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A caller broke a documented data contract (e.g. unnormalized weights).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file could not be parsed; `line` is 1-based where known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Referenced data is missing or inconsistent (dangling view ids, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged (NaN loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

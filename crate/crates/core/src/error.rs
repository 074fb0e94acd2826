use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report, grouped by the kind of caller mistake
/// or numerical condition that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("capacity exceeded: requested {requested}, available {available}")]
    Capacity { requested: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("class separation failed: {0}")]
    Separation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

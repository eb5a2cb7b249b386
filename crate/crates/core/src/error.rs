use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("truncated file: needed {needed} bytes at offset {offset}, file has {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("non-finite loss {loss} at iteration {iteration} (batch indices {batch_indices:?})")]
    NonFiniteLoss {
        iteration: u64,
        loss: f64,
        batch_indices: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}

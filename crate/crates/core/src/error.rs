use thiserror::Error;

#[derive(Debug, Error)]
pub enum DvpError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} {value} out of range {lo}..={hi}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        lo: usize,
        hi: usize,
    },

    #[error("malformed {kind} at byte {offset}: {msg}")]
    Format {
        kind: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("reward oracle failed at step {step}: {msg}")]
    Oracle { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DvpError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> DvpError {
    DvpError::InvalidArgument(msg.into())
}

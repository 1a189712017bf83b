use thiserror::Error;

/// Errors raised anywhere in the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("gradient check failed: max relative error {max_rel_err:.3e} at index {index} exceeds {tolerance:.1e}")]
    GradCheck {
        max_rel_err: f64,
        index: usize,
        tolerance: f64,
    },

    #[error("wire-format error: {0}")]
    WireFormat(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("round {round}: {source}")]
    InRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::InRound {
            round,
            source: Box::new(self),
        }
    }
}

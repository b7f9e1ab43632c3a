use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared; names the primitive that produced it.
    #[error("numeric failure: non-finite value produced by `{primitive}`")]
    NumericFailure { primitive: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parameter audit failed for tensors [{}]", offending.join(", "))]
    Audit { offending: Vec<String> },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 1 for contract and configuration problems, 2 for
    /// I/O and format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_)
            | Error::Config(_)
            | Error::NumericFailure { .. }
            | Error::Audit { .. }
            | Error::UndefinedCorrelation(_) => 1,
            Error::Parse { .. } | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

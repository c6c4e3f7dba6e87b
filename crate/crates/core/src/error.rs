use std::fmt;

/// Errors raised anywhere in the steering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error at {hook}: {detail}")]
    Numeric { hook: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("steering error: {0}")]
    Steering(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: u64, detail: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            detail: detail.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Shape(_)
            | Error::Data(_)
            | Error::Contract(_)
            | Error::Steering(_) => 2,
            Error::Training { .. } | Error::Numeric { .. } => 3,
            Error::Mismatch(_) => 4,
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => 5,
        }
    }
}

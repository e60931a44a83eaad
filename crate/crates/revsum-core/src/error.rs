use thiserror::Error;

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum Error {
    // The io::Error is folded into Display rather than chained as a source
    // so wrappers that print cause chains don't repeat it.
    #[error("io error on {path}: {cause}")]
    Io { path: String, cause: std::io::Error },

    #[error("malformed input at {location}: {message}")]
    Malformed { location: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {details}")]
    Shape { op: String, details: String },

    #[error("non-finite value in {what}{}", fmt_index(.index))]
    NonFinite { what: String, index: Option<usize> },

    #[error("sequence length {len} exceeds maximum {max} (first offending position {at})")]
    SequenceTooLong { len: usize, max: usize, at: usize },

    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("evaluation input mismatch: {0}")]
    EvalMismatch(String),

    #[error("invalid rating {value} at {location}: ratings must be integers in 1..=5")]
    InvalidRating { value: f64, location: String },

    #[error("{0}")]
    Invalid(String),
}

fn fmt_index(idx: &Option<usize>) -> String {
    match idx {
        Some(i) => format!(" (example index {i})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }

    pub fn malformed(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Malformed { location: location.into(), message: message.into() }
    }

    /// True for errors caused by bad user input (files, flags, config) as
    /// opposed to runtime failures such as divergence.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Malformed { .. }
                | Error::Config(_)
                | Error::Cache(_)
                | Error::EvalMismatch(_)
                | Error::InvalidRating { .. }
                | Error::SequenceTooLong { .. }
        )
    }
}

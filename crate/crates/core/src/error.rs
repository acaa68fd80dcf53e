//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, optimization, and I/O paths.
#[derive(Debug, Error)]
pub enum Error {
    /// A value or structure failed an invariant check.
    #[error("validation: {0}")]
    Validation(String),

    /// A scenario, topology, or run configuration is inconsistent.
    #[error("configuration: {0}")]
    Config(String),

    /// Segment index outside the query's 1..=S range.
    #[error("segment index {index} out of range 1..={count}")]
    IndexOutOfRange { index: usize, count: usize },

    /// The trigger key is already present in a segment.
    #[error("trigger key already inserted at segment {0}")]
    DuplicateKey(usize),

    /// A backend produced output that breaks the clean-output contract.
    #[error("backend contract violation: {0}")]
    BackendContract(String),

    /// Episode log line could not be parsed as JSON.
    #[error("episode log parse error at line {line}: {detail}")]
    LogParse { line: usize, detail: String },

    /// Episode log line parsed as JSON but does not match the record schema.
    #[error("episode log schema error at line {line}: {detail}")]
    LogSchema { line: usize, detail: String },

    /// An estimator was called on an empty record set.
    #[error("estimation requires at least one record")]
    EmptyRecords,

    /// An estimator was called on records spanning more than one regime.
    #[error("records span multiple regimes")]
    MixedRegimes,

    /// A statistic is undefined for the given inputs (e.g. zero variance).
    #[error("statistic undefined: {0}")]
    UndefinedStatistic(String),

    /// The optimizer produced a nonfinite loss.
    #[error("nonfinite loss at optimization step {step}")]
    Diverged { step: usize },

    /// A logit or other numeric input was not finite.
    #[error("nonfinite numeric input: {0}")]
    Nonfinite(String),

    /// The remote backend could not be reached.
    #[error("transport failure contacting {endpoint} after {attempts} attempt(s): {detail}")]
    Transport {
        endpoint: String,
        attempts: u32,
        detail: String,
    },

    /// The remote backend answered with a non-success status.
    #[error("protocol error from {endpoint}: status {status}")]
    Protocol { endpoint: String, status: u16 },

    /// The remote backend response exceeded the configured size cap.
    #[error("response from {endpoint} exceeded {cap_bytes}-byte cap")]
    ResponseTooLarge { endpoint: String, cap_bytes: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error stems from invalid input rather than a runtime or
    /// I/O failure. Used by callers to pick exit codes.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::IndexOutOfRange { .. }
                | Error::DuplicateKey(_)
        )
    }

    /// Whether the error is an I/O or wire failure.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Transport { .. }
                | Error::Protocol { .. }
                | Error::ResponseTooLarge { .. }
                | Error::LogParse { .. }
                | Error::LogSchema { .. }
        )
    }
}

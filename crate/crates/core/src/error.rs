use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("numeric accuracy not reached in {what} (error estimate {estimate:e})")]
    NumericAccuracy { what: &'static str, estimate: f64 },

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("LP solver failure: {0}")]
    SolverFailure(String),

    #[error("action extraction inconsistent at (r={r}, s={s}): forms differ by {diff:e}")]
    ExtractionInconsistency { r: usize, s: usize, diff: f64 },

    #[error("threshold repair failed: {0}")]
    RepairFailure(String),

    #[error("protocol order: {0}")]
    ProtocolOrder(String),

    #[error("protocol violation in batch {batch}: {detail}")]
    ProtocolViolation { batch: usize, detail: String },

    #[error("episode {index}: {source}")]
    Episode {
        index: u64,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

use thiserror::Error;

/// Errors raised by the solvers, the diagnostics and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("time level {level} out of range 0..={max}")]
    Index { level: usize, max: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("non-finite value in {what} at time level {level}")]
    NonFinite { what: &'static str, level: usize },

    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvariantBreach(_) | Error::NonFinite { .. } => 2,
            Error::Solver(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

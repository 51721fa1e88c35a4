use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    /// Network file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Vector or matrix dimensions do not match.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation that needs detailed balance was called on a network
    /// where it fails.
    #[error("detailed balance required: {0}")]
    DetailedBalanceRequired(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Truncated state space cannot hold the requested mass.
    #[error("truncation box too small: {0}")]
    BoxTooSmall(String),

    /// Operation restricted to networks whose reactions all have the
    /// single-species exchange form.
    #[error("network is not a Markov chain: {0}")]
    NotMarkovChain(String),

    /// Time integration failed (step-size underflow, lost positivity, ...).
    #[error("integration failure: {0}")]
    Integration(String),

    /// A constrained problem has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Numerical certification of a required inequality failed.
    #[error("certification failure: {0}")]
    Certification(String),

    /// Underlying I/O error.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad grid sizes, degenerate partitions, out-of-range parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally incompatible inputs (mismatched index spaces or dimensions).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid numerical data (negative weights, non-finite values).
    #[error("validation error: {0}")]
    Validation(String),

    /// Partition or glue graph is disconnected where connectivity is required.
    #[error("disconnected graph: {0}")]
    Disconnected(String),

    /// A truncated kernel lost an entire row or column for a positive-mass point.
    /// Signals the caller-side safeguard rather than a hard failure.
    #[error("numerically infeasible kernel: {0}")]
    Infeasible(String),

    /// An iterative solve exhausted its iteration budget.
    #[error("convergence failure after {iterations} iterations (last error {last_error:.3e}): {context}")]
    Convergence {
        iterations: usize,
        last_error: f64,
        context: String,
    },

    /// Internal consistency violated (mass totals that should match do not).
    #[error("inconsistent state: {0}")]
    Inconsistent(String),
}

pub type Result<T> = std::result::Result<T, Error>;

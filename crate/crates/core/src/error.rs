use thiserror::Error;

/// Errors raised by the saddle-search machinery.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SaddleError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("eigensolver did not converge within {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    ConvergenceFailure { sweeps: usize, off_norm: f64 },

    #[error("simulation failure: {0}")]
    SimulationFailure(String),

    #[error("kernel matrix factorization failed after jitter escalation to {jitter:e}")]
    FactorizationFailure { jitter: f64 },

    #[error("surrogate fit failed: {0}")]
    FitFailure(String),

    #[error("iterate diverged at step {step}: |x|_inf = {norm:e}")]
    Diverged { step: u64, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = SaddleError> = std::result::Result<T, E>;

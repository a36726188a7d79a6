use thiserror::Error;

/// Errors raised anywhere in the drift stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate vehicle state: {0}")]
    DegenerateState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("equilibrium solver landed on the grip branch (|beta| = {beta:.4} rad)")]
    NonDriftBranch { beta: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("quadratic program is infeasible")]
    Infeasible,

    #[error("quadratic program hit the iteration limit ({0})")]
    MaxIterations(usize),

    #[error("projection undefined: position coincides with the circle center")]
    AtCenter,

    #[error("Gram matrix is not positive definite even after raising the noise level")]
    SingularGram,

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

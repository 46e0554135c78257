use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("mode {0} has a double eigenvalue (4 mu^(1-2 alpha) = rho^2)")]
    DegenerateMode(usize),

    #[error("eigenvector matrix of mode {mode} is singular (condition number {cond:.3e})")]
    SingularProjection { mode: usize, cond: f64 },

    #[error("time {tau} lies outside [0, {t_end}]")]
    InvalidTime { tau: f64, t_end: f64 },

    #[error("operation requires a damped model")]
    UnsupportedKind,

    #[error("unsupported control direction: {0}")]
    UnsupportedDirection(String),

    #[error("time window mismatch: {0}")]
    WindowMismatch(String),

    #[error("drift is not differentiable")]
    NonDifferentiableDrift,

    #[error("unsupported test functional: {0}")]
    UnsupportedFunctional(String),

    #[error("regression at step {step} is ill-conditioned (condition number {cond:.3e})")]
    IllConditionedRegression { step: usize, cond: f64 },

    #[error("generator is not Lipschitz: {0}")]
    NonLipschitzGenerator(String),

    #[error("Monte Carlo error {error:.3e} exceeds the requested tolerance {tolerance:.3e}")]
    BudgetExceeded { error: f64, tolerance: f64 },

    #[error("Girsanov log-weight {log_weight:.3e} on path {path} overflows")]
    WeightOverflow { path: usize, log_weight: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

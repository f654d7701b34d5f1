use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside the path domain [{lo}, {hi}]")]
    TimeDomain { t: f64, lo: f64, hi: f64 },

    #[error("conditional variance k_t = {k} is not positive at t = {t}")]
    DegenerateVariance { t: f64, k: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("weight scheme {0} does not support this operation")]
    UnsupportedScheme(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite {what} at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    #[error("integration failed at t = {t} (step size {step:e} below minimum)")]
    IntegrationFailure { t: f64, step: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite gradient entry at index {index}")]
    NanGradient { index: usize },

    #[error("{rejected} of {total} samples rejected, batch aborted")]
    TooManyRejected { rejected: usize, total: usize },

    #[error("I + t^2 S is ill-conditioned at t = {t} (smallest eigenvalue {min_eig:e})")]
    IllConditioned { t: f64, min_eig: f64 },

    #[error("covariance matrix is not symmetric positive definite")]
    NotSpd,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration is not mean-free (max |column mean| = {0:e})")]
    NotMeanFree(f64),

    #[error("coincident particles {0} and {1}: energy is infinite")]
    Coincident(usize, usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("MCMC acceptance rate {rate:.4} over burn-in is below {min:.2}; reduce the step size (currently {step_size:e})")]
    LowAcceptance { rate: f64, min: f64, step_size: f64 },

    #[error("adaptive solver exceeded {max_steps} steps (reached s = {reached:.6}, last step {last_step:e})")]
    SolverMaxSteps { max_steps: usize, reached: f64, last_step: f64 },

    #[error("adaptive solver step size underflow at s = {0:.6}")]
    StepUnderflow(f64),

    #[error("training diverged at step {step}: loss = {loss}; last good checkpoint at epoch {last_good_epoch}")]
    Diverged { step: u64, loss: f64, last_good_epoch: usize },

    #[error("malformed container {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape { expected: expected.to_string(), got: got.to_string() }
    }
}

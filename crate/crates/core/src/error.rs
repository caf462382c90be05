use thiserror::Error;

/// Errors surfaced by the simulator and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("truncation safety violated: {0}")]
    Truncation(String),

    #[error("shape mismatch: expected {expected}x{expected}, got {rows}x{cols}")]
    Shape { expected: usize, rows: usize, cols: usize },

    #[error("integration failed at step {step} (t = {t:e}): {reason}")]
    Integration { step: usize, t: f64, reason: String },

    #[error("eigen-solver failure: {0}")]
    Eigen(String),

    #[error("ambiguous eigenvalue selection: {0} and {1} are equally close to the target")]
    EigenTie(String, String),

    #[error("conditional update underflow: p_p = {p_p} lies outside the state's support")]
    Underflow { p_p: f64 },

    #[error("vanishing ansatz norm (components cancel)")]
    VanishingNorm,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

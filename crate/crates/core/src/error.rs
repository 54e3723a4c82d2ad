use thiserror::Error;

/// Errors raised by the calibration and tomography routines.
#[derive(Debug, Error)]
pub enum CalError {
    #[error("truncation {truncation} too small for mean {mu}: tail mass {tail:.3e} exceeds {tolerance:.1e}; need at least {required}")]
    Truncation {
        mu: f64,
        truncation: usize,
        tail: f64,
        tolerance: f64,
        required: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid tally: n_a = {n_a} exceeds n_p = {n_p}")]
    InvalidTally { n_p: u64, n_a: u64 },

    #[error("degenerate run: {0}")]
    DegenerateRun(String),

    #[error("peak {peak} unusable: {reason}")]
    PeakUnusable { peak: usize, reason: String },

    #[error("underdetermined problem: {0}")]
    Underdetermined(String),

    #[error("fit failed: {reason} (residual norm {residual:.3e})")]
    FitFailed { reason: String, residual: f64 },

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CalError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CalError {
    CalError::InvalidInput(msg.into())
}

pub(crate) fn check_probability(name: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {value} is not a probability in [0, 1]")))
    }
}

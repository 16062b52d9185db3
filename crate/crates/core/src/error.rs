use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or argument value is outside its admissible range.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A function was evaluated outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge on [{lo}, {hi}]: estimated error {error:e} > tolerance {tol:e}")]
    Quadrature {
        lo: f64,
        hi: f64,
        error: f64,
        tol: f64,
    },

    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },

    #[error("negative density {value:e} in cell {cell} at step {step} (t = {time})")]
    NegativeDensity {
        step: usize,
        cell: usize,
        value: f64,
        time: f64,
    },

    #[error("covariance factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("loss evaluation failed at alpha = {alpha}: {reason}")]
    LossEvaluation { alpha: f64, reason: String },

    #[error("optimization aborted after {failures} consecutive loss failures")]
    TooManyFailures { failures: usize },

    #[error("sample times mismatch: {0}")]
    TimeMismatch(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. }
                | Error::NonFinite { .. }
                | Error::NegativeDensity { .. }
                | Error::Factorization { .. }
                | Error::LossEvaluation { .. }
                | Error::TooManyFailures { .. }
        )
    }
}

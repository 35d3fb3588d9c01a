use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("mollifier kernel integrates to zero on the quadrature node set")]
    DegenerateQuadrature,

    #[error("numeric overflow at step {step}{}", mode.map(|m| format!(" (mode {m})")).unwrap_or_default())]
    NumericOverflow { step: usize, mode: Option<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("trajectories in a batch must share a common time grid")]
    GridMismatch,

    #[error("empty sample set")]
    EmptySample,

    #[error(
        "noise coefficients are not square-summable against lambda^2 (fitted tail exponent {exponent:.3})"
    )]
    DivergentNoise { exponent: f64 },

    #[error("{failed} of {total} paths aborted; first failure: {first}")]
    BatchFailure {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

/// Failure while evaluating a target model or advancing a trajectory.
///
/// Most variants are recoverable: a sampler that hits one mid-trajectory
/// scores the proposal as rejected and keeps the chain where it was.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("non-finite {what} at theta = {theta:?}")]
    NonFinite { what: &'static str, theta: Vec<f64> },

    #[error("metric is not positive definite at theta = {theta:?}")]
    NotPositiveDefinite { theta: Vec<f64> },

    #[error("matrix of order {0} is not positive definite")]
    Factorization(usize),

    #[error("pole in momentum update at coordinate {coordinate} (denominator {denominator:e})")]
    Pole { coordinate: usize, denominator: f64 },

    #[error("trajectory diverged: |H| = {energy:e}")]
    Divergence { energy: f64 },

    #[error("theta = {theta:?} is outside the support of the target")]
    OutOfSupport { theta: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("model does not provide {0}")]
    Unsupported(&'static str),
}

impl EvalError {
    /// Whether a sampler may treat this error as a rejected proposal.
    pub fn is_recoverable(&self) -> bool {
        !matches!(self, EvalError::Dimension { .. } | EvalError::Unsupported(_))
    }

    pub(crate) fn non_finite(what: &'static str, theta: &nalgebra::DVector<f64>) -> Self {
        EvalError::NonFinite {
            what,
            theta: theta.iter().copied().collect(),
        }
    }
}

/// Errors reported by the chain drivers.
#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid starting point: {0}")]
    InvalidStart(EvalError),

    #[error("invalid sampler configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Eval(#[from] EvalError),
}

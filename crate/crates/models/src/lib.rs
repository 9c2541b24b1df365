//! Target models: Bayesian logistic regression, stochastic volatility,
//! log-Gaussian Cox process and Gaussian-process ODE inference.

pub mod error;
pub mod gpode;
pub mod lgcp;
pub mod logistic;
pub mod stochvol;

pub use error::DataError;

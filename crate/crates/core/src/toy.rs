//! Small analytic targets for testing samplers and integrators.

use nalgebra::{DMatrix, DVector};

use crate::error::EvalError;
use crate::metric::{MetricBundle, MetricDerivs};
use crate::model::{ParameterVector, TargetModel};

/// `N(0, I)` in `dim` dimensions with the identity metric.
#[derive(Debug, Clone)]
pub struct StandardNormal {
    pub dim: usize,
}

impl TargetModel for StandardNormal {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        Ok(-0.5 * theta.norm_squared())
    }
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(-theta)
    }
    fn metric(&self, _theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        Ok(MetricBundle::identity(self.dim))
    }
    fn has_metric(&self) -> bool {
        true
    }
    fn constant_metric(&self) -> bool {
        true
    }
}

/// `N(μ, P⁻¹)` with its precision `P` (the Fisher information) as metric.
#[derive(Debug, Clone)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl Gaussian {
    pub fn from_covariance(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Option<Self> {
        let precision = covariance.clone().cholesky()?.inverse();
        Some(Self { mean, precision })
    }
}

impl TargetModel for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        let r = theta - &self.mean;
        Ok(-0.5 * r.dot(&(&self.precision * &r)))
    }
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(-(&self.precision * (theta - &self.mean)))
    }
    fn metric(&self, _theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        MetricBundle::constant(self.precision.clone())
    }
    fn has_metric(&self) -> bool {
        true
    }
    fn constant_metric(&self) -> bool {
        true
    }
    fn initial_point(&self) -> ParameterVector {
        self.mean.clone()
    }
}

/// Standard normal target paired with the position-dependent metric
/// `G(θ) = diag(1 + θᵢ²)`.
#[derive(Debug, Clone)]
pub struct VaryingMetricGaussian {
    pub dim: usize,
}

impl TargetModel for VaryingMetricGaussian {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        Ok(-0.5 * theta.norm_squared())
    }
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(-theta)
    }
    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        let g = DMatrix::from_diagonal(&theta.map(|t| 1.0 + t * t));
        let derivs = theta.iter().map(|t| 2.0 * t).collect();
        MetricBundle::dense(g, MetricDerivs::DiagonalEntries(derivs))
    }
    fn has_metric(&self) -> bool {
        true
    }
}

/// Banana-shaped posterior: `yᵢ ~ N(θ₁ + θ₂², σ_y²)` with `θ ~ N(0, σ_θ² I)`.
#[derive(Debug, Clone)]
pub struct Banana {
    pub y: Vec<f64>,
    pub sigma_y: f64,
    pub sigma_theta: f64,
}

impl Banana {
    /// Deterministic data set with `n` observations centred on `center`.
    pub fn synthetic(n: usize, center: f64, sigma_y: f64, sigma_theta: f64) -> Self {
        let y = (0..n)
            .map(|i| center + sigma_y * ((i as f64 + 0.5) / n as f64 * std::f64::consts::TAU).sin())
            .collect();
        Self {
            y,
            sigma_y,
            sigma_theta,
        }
    }
}

impl TargetModel for Banana {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        let m = theta[0] + theta[1] * theta[1];
        let sy2 = self.sigma_y * self.sigma_y;
        let lik: f64 = self.y.iter().map(|y| -(y - m).powi(2) / (2.0 * sy2)).sum();
        Ok(lik - theta.norm_squared() / (2.0 * self.sigma_theta * self.sigma_theta))
    }
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        let m = theta[0] + theta[1] * theta[1];
        let s: f64 = self.y.iter().map(|y| y - m).sum::<f64>() / (self.sigma_y * self.sigma_y);
        let st2 = self.sigma_theta * self.sigma_theta;
        Ok(DVector::from_vec(vec![
            s - theta[0] / st2,
            2.0 * theta[1] * s - theta[1] / st2,
        ]))
    }
    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        let c = self.y.len() as f64 / (self.sigma_y * self.sigma_y);
        let prior = 1.0 / (self.sigma_theta * self.sigma_theta);
        let t2 = theta[1];
        let g = DMatrix::from_row_slice(
            2,
            2,
            &[c + prior, 2.0 * c * t2, 2.0 * c * t2, 4.0 * c * t2 * t2 + prior],
        );
        let d1 = DMatrix::zeros(2, 2);
        let d2 = DMatrix::from_row_slice(2, 2, &[0.0, 2.0 * c, 2.0 * c, 8.0 * c * t2]);
        MetricBundle::dense(g, MetricDerivs::Dense(vec![d1, d2]))
    }
    fn has_metric(&self) -> bool {
        true
    }
}

//! Log-Gaussian Cox process on an `n × n` grid.
//!
//! Latent field `x ~ N(μ1, Σ)` with `Σ_{(i,j),(i',j')} = σ² exp(−δ / (nβ))`,
//! `δ` the Euclidean distance between cells, and counts
//! `y_{ij} ~ Poisson(m exp(x_{ij}))` with cell area `m = 1/n²`. Cells are
//! linearized row-major: cell `(i, j)` is coordinate `i·n + j`.

use geomc_core::{EvalError, MetricBundle, MetricDerivs, ParameterVector, TargetModel};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::DataError;

/// Hyperparameters of the latent field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgcpParams {
    pub n: usize,
    pub beta: f64,
    pub sigma2: f64,
    pub mu: f64,
}

impl LgcpParams {
    /// `β = 1/33`, `σ² = 1.91`, `μ = log 126 − σ²/2` on an `n × n` grid.
    pub fn standard(n: usize) -> Self {
        let sigma2 = 1.91;
        Self {
            n,
            beta: 1.0 / 33.0,
            sigma2,
            mu: 126f64.ln() - sigma2 / 2.0,
        }
    }

    pub fn cell_area(&self) -> f64 {
        1.0 / (self.n * self.n) as f64
    }
}

/// Prior covariance of the latent field.
pub fn covariance(params: &LgcpParams) -> DMatrix<f64> {
    let n = params.n;
    let d = n * n;
    let scale = n as f64 * params.beta;
    DMatrix::from_fn(d, d, |a, b| {
        let (i, j) = ((a / n) as f64, (a % n) as f64);
        let (k, l) = ((b / n) as f64, (b % n) as f64);
        let delta = ((i - k).powi(2) + (j - l).powi(2)).sqrt();
        params.sigma2 * (-delta / scale).exp()
    })
}

/// A simulated field and its counts.
#[derive(Debug, Clone)]
pub struct LgcpData {
    pub x_true: Vec<f64>,
    pub y: Vec<u64>,
}

pub fn generate<R: Rng + ?Sized>(params: &LgcpParams, rng: &mut R) -> Result<LgcpData, DataError> {
    let d = params.n * params.n;
    let x_true: Vec<f64> = if params.sigma2 == 0.0 {
        vec![params.mu; d]
    } else {
        let chol = Cholesky::new(covariance(params))
            .ok_or_else(|| DataError::Invalid("latent covariance is not positive definite".into()))?;
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        (chol.l() * z).iter().map(|v| v + params.mu).collect()
    };
    let m = params.cell_area();
    let y = x_true
        .iter()
        .map(|x| {
            let rate = m * x.exp();
            if rate > 0.0 {
                Poisson::new(rate).map(|p| p.sample(rng) as u64).unwrap_or(0)
            } else {
                0
            }
        })
        .collect();
    Ok(LgcpData { x_true, y })
}

/// Posterior of the latent field given counts, hyperparameters fixed.
#[derive(Debug, Clone)]
pub struct LgcpModel {
    params: LgcpParams,
    y: DVector<f64>,
    precision: DMatrix<f64>,
}

impl LgcpModel {
    pub fn new(params: LgcpParams, y: &[u64]) -> Result<Self, DataError> {
        let d = params.n * params.n;
        if y.len() != d {
            return Err(DataError::Invalid(format!(
                "expected {d} counts for a {0}×{0} grid, got {1}",
                params.n,
                y.len()
            )));
        }
        if !(params.sigma2 > 0.0 && params.beta > 0.0) {
            return Err(DataError::Invalid("sigma2 and beta must be positive".into()));
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(covariance(&params))
            .ok_or_else(|| DataError::Invalid("latent covariance is not positive definite".into()))?;
        let mut precision = chol.inverse();
        geomc_core::linalg::symmetrize(&mut precision);
        Ok(Self {
            params,
            y: DVector::from_iterator(d, y.iter().map(|v| *v as f64)),
            precision,
        })
    }

    pub fn params(&self) -> &LgcpParams {
        &self.params
    }

    /// `Σ⁻¹`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `e = m exp(x)`, rejecting overflow.
    pub fn intensity(&self, x: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        if x.len() != self.y.len() {
            return Err(EvalError::Dimension {
                expected: self.y.len(),
                got: x.len(),
            });
        }
        let m = self.params.cell_area();
        let e = x.map(|v| m * v.exp());
        if e.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NonFinite {
                what: "intensity",
                theta: x.iter().copied().collect(),
            });
        }
        Ok(e)
    }

    fn centered(&self, x: &ParameterVector) -> DVector<f64> {
        x.add_scalar(-self.params.mu)
    }

    /// Poisson part of the gradient, `y − e`.
    pub fn likelihood_grad(&self, x: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(&self.y - self.intensity(x)?)
    }
}

impl TargetModel for LgcpModel {
    fn dim(&self) -> usize {
        self.y.len()
    }

    fn log_density(&self, x: &ParameterVector) -> Result<f64, EvalError> {
        self.log_density_and_grad(x).map(|(l, _)| l)
    }

    fn grad_log_density(&self, x: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        self.log_density_and_grad(x).map(|(_, g)| g)
    }

    fn log_density_and_grad(&self, x: &ParameterVector) -> Result<(f64, DVector<f64>), EvalError> {
        let e = self.intensity(x)?;
        let r = self.centered(x);
        let pr = &self.precision * &r;
        let l = self.y.dot(x) - e.sum() - 0.5 * r.dot(&pr);
        Ok((l, &self.y - e - pr))
    }

    /// `G = diag(e) + Σ⁻¹`, with `∂G/∂x_k` the single diagonal entry `e_k`.
    fn metric(&self, x: &ParameterVector) -> Result<MetricBundle, EvalError> {
        let e = self.intensity(x)?;
        let mut g = self.precision.clone();
        for (k, v) in e.iter().enumerate() {
            g[(k, k)] += v;
        }
        MetricBundle::dense(g, MetricDerivs::DiagonalEntries(e.iter().copied().collect()))
    }

    fn has_metric(&self) -> bool {
        true
    }

    fn initial_point(&self) -> ParameterVector {
        DVector::from_element(self.y.len(), self.params.mu)
    }
}

/// Relative increase of the mean log density between the first and second
/// halves of the trailing `fraction` of `trace`.
///
/// Values near zero indicate the chain has stopped climbing.
pub fn plateau_increase(trace: &[f64], fraction: f64) -> f64 {
    let len = ((trace.len() as f64 * fraction).round() as usize).max(2);
    let window = &trace[trace.len() - len.min(trace.len())..];
    let half = window.len() / 2;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, second) = (mean(&window[..half]), mean(&window[half..]));
    (second - first) / first.abs()
}

//! Stochastic volatility model
//!
//! ```text
//! y_t = ε_t β exp(x_t / 2),           ε_t ~ N(0, 1)
//! x_t = φ x_{t−1} + η_t,              η_t ~ N(0, σ²)
//! x_1 ~ N(0, σ² / (1 − φ²))
//! ```
//!
//! Parameters are sampled in the unconstrained coordinates
//! `(β, γ = log σ, α = atanh φ)` and the latent volatilities `x` in a
//! second Gibbs block whose metric is tridiagonal and independent of `x`.

use std::time::Instant;

use geomc_core::linalg::SpdMatrix;
use geomc_core::{
    EvalError, Kernel, KernelConfig, MetricBundle, MetricDerivs, ParameterVector, PointEval, SamplerError,
    TargetModel,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Hyperparameters of the priors `p(β²) ∝ β⁻²`, `σ² ~ Inv-χ²(ν, s²)` and
/// `(φ + 1)/2 ~ Beta(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvPriors {
    pub nu: f64,
    pub s2: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for SvPriors {
    fn default() -> Self {
        Self {
            nu: 10.0,
            s2: 0.05,
            a: 20.0,
            b: 1.5,
        }
    }
}

/// Natural-scale parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvParams {
    pub beta: f64,
    pub sigma: f64,
    pub phi: f64,
}

impl SvParams {
    /// `(β, log σ, atanh φ)`.
    pub fn transformed(&self) -> [f64; 3] {
        [self.beta, self.sigma.ln(), self.phi.atanh()]
    }

    pub fn from_transformed(theta: &[f64]) -> Self {
        Self {
            beta: theta[0],
            sigma: theta[1].exp(),
            phi: theta[2].tanh(),
        }
    }
}

/// Observations and the latent path that generated them.
#[derive(Debug, Clone)]
pub struct SvData {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

pub fn simulate<R: Rng + ?Sized>(params: SvParams, t: usize, rng: &mut R) -> SvData {
    let SvParams { beta, sigma, phi } = params;
    let mut x = Vec::with_capacity(t);
    let mut y = Vec::with_capacity(t);
    let mut prev = 0.0;
    for i in 0..t {
        let z: f64 = rng.sample(StandardNormal);
        let xt = if i == 0 {
            z * sigma / (1.0 - phi * phi).sqrt()
        } else {
            phi * prev + sigma * z
        };
        let e: f64 = rng.sample(StandardNormal);
        y.push(e * beta * (xt / 2.0).exp());
        x.push(xt);
        prev = xt;
    }
    SvData { y, x }
}

// log cosh without overflow.
fn log_cosh(a: f64) -> f64 {
    let m = a.abs();
    m + (-2.0 * m).exp().ln_1p() - std::f64::consts::LN_2
}

/// Sums of the AR(1) quadratic form used by both blocks.
struct ArSums {
    /// `x₁²(1 − φ²) + Σ_{t≥2} (x_t − φx_{t−1})²`
    quad: f64,
    /// `Σ_{t≥2} x_{t−1}(x_t − φx_{t−1})`
    cross: f64,
}

fn ar_sums(x: &[f64], phi: f64) -> ArSums {
    let mut quad = x[0] * x[0] * (1.0 - phi * phi);
    let mut cross = 0.0;
    for w in x.windows(2) {
        let r = w[1] - phi * w[0];
        quad += r * r;
        cross += w[0] * r;
    }
    ArSums { quad, cross }
}

/// Conditional of `(β, log σ, atanh φ)` given `y` and `x`.
#[derive(Debug, Clone)]
pub struct SvParamModel<'a> {
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub priors: SvPriors,
}

impl SvParamModel<'_> {
    fn t(&self) -> f64 {
        self.y.len() as f64
    }

    // Σ y_t² e^{−x_t}
    fn scaled_sq(&self) -> f64 {
        self.y.iter().zip(self.x).map(|(y, x)| y * y * (-x).exp()).sum()
    }

    fn check(&self, theta: &ParameterVector) -> Result<(), EvalError> {
        if theta.len() != 3 {
            return Err(EvalError::Dimension {
                expected: 3,
                got: theta.len(),
            });
        }
        if self.x.is_empty() || self.x.len() != self.y.len() {
            return Err(EvalError::Dimension {
                expected: self.y.len().max(1),
                got: self.x.len(),
            });
        }
        if !(theta[0] > 0.0) || !theta.iter().all(|v| v.is_finite()) {
            return Err(EvalError::OutOfSupport {
                theta: theta.iter().copied().collect(),
            });
        }
        Ok(())
    }

    /// Log of the three transformed priors, each including its Jacobian.
    pub fn log_priors(&self, theta: &ParameterVector) -> [f64; 3] {
        let SvPriors { nu, s2, a, b } = self.priors;
        let (beta, gamma, alpha) = (theta[0], theta[1], theta[2]);
        let lc = log_cosh(alpha);
        [
            -beta.ln(),
            -nu * gamma - 0.5 * nu * s2 * (-2.0 * gamma).exp(),
            // ln(1 + φ) = α − ln cosh α, ln(1 − φ) = −α − ln cosh α,
            // ln(1 − φ²) = −2 ln cosh α.
            (a - 1.0) * (alpha - lc) + (b - 1.0) * (-alpha - lc) - 2.0 * lc,
        ]
    }
}

/// Metric of the parameter block in `(β, γ, α)` coordinates.
pub fn param_metric(beta: f64, alpha: f64, t: usize) -> Result<MetricBundle, EvalError> {
    let t = t as f64;
    let phi = alpha.tanh();
    let one_m = 1.0 - phi * phi;
    let g = DMatrix::from_row_slice(
        3,
        3,
        &[
            2.0 * t / (beta * beta),
            0.0,
            0.0,
            0.0,
            t + 1.0,
            2.0 * phi,
            0.0,
            2.0 * phi,
            phi * phi * (3.0 - t) + (t - 1.0),
        ],
    );
    let mut d_beta = DMatrix::zeros(3, 3);
    d_beta[(0, 0)] = -4.0 * t / beta.powi(3);
    let d_gamma = DMatrix::zeros(3, 3);
    let mut d_alpha = DMatrix::zeros(3, 3);
    d_alpha[(1, 2)] = 2.0 * one_m;
    d_alpha[(2, 1)] = 2.0 * one_m;
    d_alpha[(2, 2)] = 2.0 * phi * one_m * (3.0 - t);
    MetricBundle::dense(g, MetricDerivs::Dense(vec![d_beta, d_gamma, d_alpha]))
}

impl TargetModel for SvParamModel<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        self.check(theta)?;
        let (beta, gamma, alpha) = (theta[0], theta[1], theta[2]);
        let t = self.t();
        let phi = alpha.tanh();
        let sigma2 = (2.0 * gamma).exp();
        let sums = ar_sums(self.x, phi);
        let lik = -t * beta.ln() - self.scaled_sq() / (2.0 * beta * beta);
        // x prior: −T log σ + ½ log(1 − φ²) − quad / (2σ²)
        let ar = -t * gamma - log_cosh(alpha) - sums.quad / (2.0 * sigma2);
        let priors: f64 = self.log_priors(theta).iter().sum();
        let l = lik + ar + priors;
        if !l.is_finite() {
            return Err(EvalError::NonFinite {
                what: "log density",
                theta: theta.iter().copied().collect(),
            });
        }
        Ok(l)
    }

    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        self.check(theta)?;
        let SvPriors { nu, s2, a, b } = self.priors;
        let (beta, gamma, alpha) = (theta[0], theta[1], theta[2]);
        let t = self.t();
        let phi = alpha.tanh();
        let one_m = 1.0 - phi * phi;
        let sigma2 = (2.0 * gamma).exp();
        let sums = ar_sums(self.x, phi);
        let x1 = self.x[0];

        let d_beta = -t / beta + self.scaled_sq() / beta.powi(3) - 1.0 / beta;
        let d_gamma = -t + sums.quad / sigma2 + nu * s2 / sigma2 - nu;
        // Chain rule through dφ/dα = 1 − φ², with the 1/(1 ± φ) factors
        // cancelled so the expression stays finite as |φ| → 1.
        let d_alpha = -phi + (phi * x1 * x1 + sums.cross) / sigma2 * one_m + (a - 1.0) * (1.0 - phi)
            - (b - 1.0) * (1.0 + phi)
            - 2.0 * phi;
        Ok(DVector::from_vec(vec![d_beta, d_gamma, d_alpha]))
    }

    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        self.check(theta)?;
        param_metric(theta[0], theta[2], self.y.len())
    }

    fn has_metric(&self) -> bool {
        true
    }
}

/// Tridiagonal `G = ½I + C⁻¹` where `C⁻¹` is the AR(1) precision.
pub fn latent_metric(phi: f64, sigma: f64, t: usize) -> Result<MetricBundle, EvalError> {
    let (diag, off) = ar1_precision(phi, sigma, t);
    let diag = diag.into_iter().map(|d| d + 0.5).collect();
    MetricBundle::new(SpdMatrix::Tridiagonal { diag, off }, MetricDerivs::Zero)
}

/// Diagonal and off-diagonal of the stationary AR(1) precision matrix.
pub fn ar1_precision(phi: f64, sigma: f64, t: usize) -> (Vec<f64>, Vec<f64>) {
    let s2 = sigma * sigma;
    let diag = (0..t)
        .map(|i| {
            if i == 0 || i + 1 == t {
                1.0 / s2
            } else {
                (1.0 + phi * phi) / s2
            }
        })
        .collect();
    let off = vec![-phi / s2; t.saturating_sub(1)];
    (diag, off)
}

/// Conditional of the latent log-volatilities given `y` and the parameters.
#[derive(Debug, Clone)]
pub struct SvLatentModel<'a> {
    pub y: &'a [f64],
    pub params: SvParams,
}

impl SvLatentModel<'_> {
    fn check(&self, x: &ParameterVector) -> Result<(), EvalError> {
        if x.is_empty() || x.len() != self.y.len() {
            return Err(EvalError::Dimension {
                expected: self.y.len().max(1),
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl TargetModel for SvLatentModel<'_> {
    fn dim(&self) -> usize {
        self.y.len()
    }

    fn log_density(&self, x: &ParameterVector) -> Result<f64, EvalError> {
        self.check(x)?;
        let SvParams { beta, sigma, phi } = self.params;
        let b2 = beta * beta;
        let obs: f64 = self
            .y
            .iter()
            .zip(x.iter())
            .map(|(y, x)| -0.5 * x - y * y * (-x).exp() / (2.0 * b2))
            .sum();
        let xs = x.as_slice();
        let l = obs - ar_sums(xs, phi).quad / (2.0 * sigma * sigma);
        if !l.is_finite() {
            return Err(EvalError::NonFinite {
                what: "log density",
                theta: xs.to_vec(),
            });
        }
        Ok(l)
    }

    fn grad_log_density(&self, x: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        self.check(x)?;
        let SvParams { beta, sigma, phi } = self.params;
        let t = x.len();
        let s2 = sigma * sigma;
        let b2 = beta * beta;
        let mut g = DVector::from_fn(t, |i, _| -0.5 + self.y[i] * self.y[i] * (-x[i]).exp() / (2.0 * b2));
        if t == 1 {
            g[0] -= x[0] * (1.0 - phi * phi) / s2;
            return Ok(g);
        }
        g[0] -= (x[0] - phi * x[1]) / s2;
        g[t - 1] -= (x[t - 1] - phi * x[t - 2]) / s2;
        for i in 1..t - 1 {
            g[i] += (-(x[i] - phi * x[i - 1]) + phi * (x[i + 1] - phi * x[i])) / s2;
        }
        Ok(g)
    }

    fn metric(&self, _x: &ParameterVector) -> Result<MetricBundle, EvalError> {
        latent_metric(self.params.phi, self.params.sigma, self.y.len())
    }

    fn has_metric(&self) -> bool {
        true
    }

    fn constant_metric(&self) -> bool {
        true
    }
}

/// Current state of the two-block Gibbs sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SvState {
    /// `(β, log σ, atanh φ)`.
    pub theta: [f64; 3],
    pub x: Vec<f64>,
}

impl SvState {
    pub fn params(&self) -> SvParams {
        SvParams::from_transformed(&self.theta)
    }
}

/// Kernels for the parameter and latent blocks.
#[derive(Debug, Clone)]
pub struct SvSampler {
    pub priors: SvPriors,
    param_kernel: Kernel,
    latent_kernel: Kernel,
}

/// Acceptance of each block in one sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepAcceptance {
    pub params: bool,
    pub latent: bool,
    /// Hamiltonian after the parameter transition (HMC family).
    pub param_energy: Option<f64>,
}

impl SvSampler {
    pub fn new(
        param_config: &KernelConfig,
        latent_config: &KernelConfig,
        y: &[f64],
        state: &SvState,
        priors: SvPriors,
    ) -> Result<Self, SamplerError> {
        let pm = SvParamModel {
            y,
            x: &state.x,
            priors,
        };
        let lm = SvLatentModel {
            y,
            params: state.params(),
        };
        Ok(Self {
            priors,
            param_kernel: Kernel::new(param_config, &pm)?,
            latent_kernel: Kernel::new(latent_config, &lm)?,
        })
    }

    /// One sweep: parameters given `x`, then `x` given parameters.
    pub fn sweep<R: Rng + ?Sized>(
        &mut self,
        y: &[f64],
        state: &mut SvState,
        rng: &mut R,
    ) -> Result<SweepAcceptance, SamplerError> {
        let pm = SvParamModel {
            y,
            x: &state.x,
            priors: self.priors,
        };
        let start = self
            .param_kernel
            .prepare(&pm, DVector::from_column_slice(&state.theta))
            .map_err(SamplerError::InvalidStart)?;
        let t = self.param_kernel.transition(&pm, start, rng)?;
        state.theta.copy_from_slice(t.point.theta.as_slice());
        let params_accepted = t.accepted;
        let param_energy = t.energy;

        let lm = SvLatentModel {
            y,
            params: state.params(),
        };
        let start = self
            .latent_kernel
            .prepare(&lm, DVector::from_column_slice(&state.x))
            .map_err(SamplerError::InvalidStart)?;
        let t = self.latent_kernel.transition(&lm, start, rng)?;
        state.x.copy_from_slice(t.point.theta.as_slice());
        Ok(SweepAcceptance {
            params: params_accepted,
            latent: t.accepted,
            param_energy,
        })
    }

    pub fn tune(&mut self, acceptance: SweepAcceptance) {
        self.param_kernel.tune(acceptance.params);
        self.latent_kernel.tune(acceptance.latent);
    }

    pub fn freeze(&mut self) {
        self.param_kernel.freeze();
        self.latent_kernel.freeze();
    }
}

/// Single Gibbs sweep with an existing sampler.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut SvState,
    y: &[f64],
    sampler: &mut SvSampler,
    rng: &mut R,
) -> Result<SweepAcceptance, SamplerError> {
    sampler.sweep(y, state, rng)
}

/// Output of [`run_gibbs`].
#[derive(Debug, Clone)]
pub struct SvRun {
    /// Natural-scale `(β, σ, φ)` draws, one row per retained sweep.
    pub params: DMatrix<f64>,
    /// Per-sweep acceptance of the parameter block.
    pub param_accepted: Vec<bool>,
    /// Per-sweep parameter-block Hamiltonian, when the kernel records one.
    pub param_energies: Option<Vec<f64>>,
    pub param_acceptance: f64,
    pub latent_acceptance: f64,
    /// Posterior mean of the latent path.
    pub latent_mean: Vec<f64>,
    pub burn_in_seconds: f64,
    pub sampling_seconds: f64,
}

/// Burn-in (with tuning) followed by `n_samples` recorded sweeps.
pub fn run_gibbs<R: Rng + ?Sized>(
    y: &[f64],
    mut state: SvState,
    sampler: &mut SvSampler,
    burn_in: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<SvRun, SamplerError> {
    let start = Instant::now();
    for _ in 0..burn_in {
        let acc = sampler.sweep(y, &mut state, rng)?;
        sampler.tune(acc);
    }
    sampler.freeze();
    let burn_in_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut params = DMatrix::zeros(n_samples, 3);
    let mut latent_mean = vec![0.0; y.len()];
    let (mut pa, mut la) = (0usize, 0usize);
    let mut param_accepted = Vec::with_capacity(n_samples);
    let mut energies = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let acc = sampler.sweep(y, &mut state, rng)?;
        param_accepted.push(acc.params);
        energies.push(acc.param_energy);
        pa += usize::from(acc.params);
        la += usize::from(acc.latent);
        let p = state.params();
        params[(i, 0)] = p.beta;
        params[(i, 1)] = p.sigma;
        params[(i, 2)] = p.phi;
        for (m, x) in latent_mean.iter_mut().zip(&state.x) {
            *m += x / n_samples as f64;
        }
    }
    let rate = |k: usize| if n_samples == 0 { 0.0 } else { k as f64 / n_samples as f64 };
    Ok(SvRun {
        params,
        param_accepted,
        param_energies: energies.into_iter().collect(),
        param_acceptance: rate(pa),
        latent_acceptance: rate(la),
        latent_mean,
        burn_in_seconds,
        sampling_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate a block's current point to check a state is admissible.
pub fn validate_state(y: &[f64], state: &SvState, priors: SvPriors) -> Result<(), EvalError> {
    let pm = SvParamModel {
        y,
        x: &state.x,
        priors,
    };
    PointEval::with_grad(&pm, DVector::from_column_slice(&state.theta)).map(|_| ())
}

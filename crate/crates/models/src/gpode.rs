//! Parameter inference for nonlinear ODEs by gradient matching.
//!
//! Each observed species gets a Gaussian-process prior with a squared
//! exponential kernel. The ODE never has to be solved during sampling:
//! structural parameters `θ` are scored by how well the vector field
//! `f(X, θ)` matches the GP-implied state derivatives, through
//!
//! ```text
//! U = Σₙ (fₙ − mₙ)ᵀ (Kₙ + γₙ I)⁻¹ (fₙ − mₙ)
//! ```
//!
//! where `mₙ`, `Kₙ` are the mean and covariance of the state derivatives
//! conditional on the sampled states. A sweep updates, in order, the GP
//! hyperparameters of every species, the states (exact Gaussian draw), the
//! mismatch scales `δₙ = √γₙ` and finally `θ`.

use std::time::Instant;

use geomc_core::linalg::{symmetrize, trace_of_product};
use geomc_core::{
    EvalError, Kernel, KernelConfig, MetricBundle, MetricDerivs, ParameterVector, SamplerError, TargetModel,
};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative jitter added to the noise-free state covariance before solves.
pub const STATE_JITTER: f64 = 1e-6;
/// Relative jitter added to the `θ` metric when it is numerically singular.
pub const METRIC_JITTER: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `K(tᵢ, tⱼ) = φ₁ exp(−(tⱼ − tᵢ)² / (2φ₂²)) + σ δᵢⱼ`.
///
/// `noise` enters linearly, so it is the observation-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfKernel {
    pub amplitude: f64,
    pub length: f64,
    pub noise: f64,
}

impl RbfKernel {
    pub fn new(amplitude: f64, length: f64, noise: f64) -> Self {
        Self {
            amplitude,
            length,
            noise,
        }
    }

    /// From `[φ₁, φ₂, σ]`.
    pub fn from_slice(p: &[f64]) -> Self {
        Self::new(p[0], p[1], p[2])
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.amplitude, self.length, self.noise]
    }

    fn check(&self) -> Result<(), EvalError> {
        let p = self.to_array();
        if p.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(EvalError::OutOfSupport { theta: p.to_vec() })
        }
    }

    /// Noise-free covariance `C`.
    pub fn signal_matrix(&self, t: &[f64]) -> DMatrix<f64> {
        let l2 = self.length * self.length;
        DMatrix::from_fn(t.len(), t.len(), |i, j| {
            let d = t[j] - t[i];
            self.amplitude * (-d * d / (2.0 * l2)).exp()
        })
    }

    /// `C + σI`.
    pub fn matrix(&self, t: &[f64]) -> DMatrix<f64> {
        let mut k = self.signal_matrix(t);
        for i in 0..t.len() {
            k[(i, i)] += self.noise;
        }
        k
    }

    /// `∂K/∂φ₁`, `∂K/∂φ₂`, `∂K/∂σ`.
    pub fn partials(&self, t: &[f64]) -> [DMatrix<f64>; 3] {
        let c = self.signal_matrix(t);
        let l3 = self.length.powi(3);
        let d_amp = &c / self.amplitude;
        let d_len = DMatrix::from_fn(t.len(), t.len(), |i, j| c[(i, j)] * (t[j] - t[i]).powi(2) / l3);
        [d_amp, d_len, DMatrix::identity(t.len(), t.len())]
    }

    /// `∂²K/∂pᵢ∂pⱼ` over `p = (φ₁, φ₂, σ)`. Only the `(φ₁, φ₂)` block is
    /// nonzero.
    pub fn second_partials(&self, t: &[f64]) -> [[DMatrix<f64>; 3]; 3] {
        let n = t.len();
        let c = self.signal_matrix(t);
        let l = self.length;
        let (l2, l3, l6) = (l * l, l.powi(3), l.powi(6));
        let amp_len = DMatrix::from_fn(n, n, |i, j| c[(i, j)] * (t[j] - t[i]).powi(2) / (l3 * self.amplitude));
        let len_len = DMatrix::from_fn(n, n, |i, j| {
            let d2 = (t[j] - t[i]).powi(2);
            c[(i, j)] * d2 * (d2 - 3.0 * l2) / l6
        });
        let z = || DMatrix::zeros(n, n);
        [
            [z(), amp_len.clone(), z()],
            [amp_len, len_len, z()],
            [z(), z(), z()],
        ]
    }

    /// `′C[i, j] = cov(ẋ(tᵢ), x(tⱼ))`; its transpose is `C′`.
    pub fn derivative_cross(&self, t: &[f64]) -> DMatrix<f64> {
        let c = self.signal_matrix(t);
        let l2 = self.length * self.length;
        DMatrix::from_fn(t.len(), t.len(), |i, j| -(t[i] - t[j]) / l2 * c[(i, j)])
    }

    /// `C″[i, j] = cov(ẋ(tᵢ), ẋ(tⱼ))`.
    pub fn derivative_auto(&self, t: &[f64]) -> DMatrix<f64> {
        let c = self.signal_matrix(t);
        let l2 = self.length * self.length;
        DMatrix::from_fn(t.len(), t.len(), |i, j| {
            let d2 = (t[i] - t[j]).powi(2);
            (1.0 / l2 - d2 / (l2 * l2)) * c[(i, j)]
        })
    }
}

fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, EvalError> {
    let n = m.nrows();
    Cholesky::new(m).ok_or(EvalError::Factorization(n))
}

fn check_series(t: &[f64], y: &[f64]) -> Result<(), EvalError> {
    if t.len() != y.len() || t.is_empty() {
        return Err(EvalError::Dimension {
            expected: t.len().max(1),
            got: y.len(),
        });
    }
    Ok(())
}

/// `log N(y | 0, K)`.
pub fn gp_marginal_loglik(kernel: &RbfKernel, t: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    check_series(t, y)?;
    kernel.check()?;
    let chol = cholesky(kernel.matrix(t))?;
    let y = DVector::from_column_slice(y);
    let alpha = chol.solve(&y);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * t.len() as f64 * LN_2PI)
}

/// `½ tr[(K⁻¹yyᵀK⁻¹ − K⁻¹) ∂K/∂pᵢ]` for `p = (φ₁, φ₂, σ)`.
pub fn gp_marginal_grad(kernel: &RbfKernel, t: &[f64], y: &[f64]) -> Result<DVector<f64>, EvalError> {
    check_series(t, y)?;
    kernel.check()?;
    let chol = cholesky(kernel.matrix(t))?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let kinv = chol.inverse();
    let partials = kernel.partials(t);
    Ok(DVector::from_fn(3, |i, _| {
        let dk = &partials[i];
        0.5 * ((dk * &alpha).dot(&alpha) - kinv.component_mul(dk).sum())
    }))
}

/// Fisher metric `Gᵢⱼ = ½ tr(K⁻¹ ∂ᵢK K⁻¹ ∂ⱼK)` and its derivatives.
pub fn gp_metric(kernel: &RbfKernel, t: &[f64]) -> Result<MetricBundle, EvalError> {
    kernel.check()?;
    let kinv = cholesky(kernel.matrix(t))?.inverse();
    let partials = kernel.partials(t);
    let second = kernel.second_partials(t);
    let p: Vec<DMatrix<f64>> = partials.iter().map(|d| &kinv * d).collect();
    let tr = trace_of_product;
    let mut g = DMatrix::from_fn(3, 3, |i, j| 0.5 * tr(&p[i], &p[j]));
    let q: Vec<Vec<DMatrix<f64>>> = second
        .iter()
        .map(|row| row.iter().map(|d| &kinv * d).collect())
        .collect();
    let mut derivs = Vec::with_capacity(3);
    for k in 0..3 {
        let mut dk = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in i..3 {
                // ∂ₖ of K⁻¹∂ᵢK K⁻¹∂ⱼK, using ∂K⁻¹ = −K⁻¹ ∂K K⁻¹.
                let pki = &p[k] * &p[i];
                let pik = &p[i] * &p[k];
                let v = 0.5 * (-tr(&pki, &p[j]) + tr(&q[i][k], &p[j]) - tr(&pik, &p[j]) + tr(&p[i], &q[j][k]));
                dk[(i, j)] = v;
                dk[(j, i)] = v;
            }
        }
        derivs.push(dk);
    }
    symmetrize(&mut g);
    MetricBundle::dense(g, MetricDerivs::Dense(derivs))
}

/// Log-normal prior `log p ~ N(0, sd²)` on a positive quantity, as a density
/// on `p` itself.
fn log_normal_prior(p: f64, sd: f64) -> (f64, f64) {
    let lp = p.ln();
    let s2 = sd * sd;
    (-lp * lp / (2.0 * s2) - lp, -lp / (s2 * p) - 1.0 / p)
}

/// Posterior of one species' GP hyperparameters `(φ₁, φ₂, σ)` given its
/// observations, under independent log-normal priors.
#[derive(Debug, Clone)]
pub struct GpHyperModel<'a> {
    pub times: &'a [f64],
    pub y: &'a [f64],
    pub prior_log_sd: f64,
}

impl TargetModel for GpHyperModel<'_> {
    fn dim(&self) -> usize {
        3
    }

    fn log_density(&self, p: &ParameterVector) -> Result<f64, EvalError> {
        let kernel = RbfKernel::from_slice(p.as_slice());
        let prior: f64 = p.iter().map(|v| log_normal_prior(*v, self.prior_log_sd).0).sum();
        Ok(gp_marginal_loglik(&kernel, self.times, self.y)? + prior)
    }

    fn grad_log_density(&self, p: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        let kernel = RbfKernel::from_slice(p.as_slice());
        let mut g = gp_marginal_grad(&kernel, self.times, self.y)?;
        for (gi, v) in g.iter_mut().zip(p.iter()) {
            *gi += log_normal_prior(*v, self.prior_log_sd).1;
        }
        Ok(g)
    }

    fn metric(&self, p: &ParameterVector) -> Result<MetricBundle, EvalError> {
        gp_metric(&RbfKernel::from_slice(p.as_slice()), self.times)
    }

    fn has_metric(&self) -> bool {
        true
    }
}

/// Mean and covariance of the noise-free states given noisy observations:
/// `μ = C(C + σI)⁻¹y`, `Σ = σC(C + σI)⁻¹`.
///
/// Computed in the eigenbasis of `C`, which stays stable when the squared
/// exponential kernel makes `C` numerically singular.
pub fn state_posterior(kernel: &RbfKernel, t: &[f64], y: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let (mean, q, var) = state_posterior_eigen(kernel, t, y)?;
    let cov = &q * DMatrix::from_diagonal(&var) * q.transpose();
    Ok((mean, cov))
}

fn state_posterior_eigen(
    kernel: &RbfKernel,
    t: &[f64],
    y: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), EvalError> {
    check_series(t, y)?;
    kernel.check()?;
    let eig = SymmetricEigen::new(kernel.signal_matrix(t));
    let s = kernel.noise;
    let lambda = eig.eigenvalues.map(|l| l.max(0.0));
    let q = eig.eigenvectors;
    let proj = q.tr_mul(&DVector::from_column_slice(y));
    let shrunk = DVector::from_fn(lambda.len(), |i, _| lambda[i] / (lambda[i] + s) * proj[i]);
    let var = lambda.map(|l| s * l / (l + s));
    Ok((&q * shrunk, q, var))
}

/// Exact draw from the state posterior of one species.
pub fn sample_states<R: Rng + ?Sized>(
    kernel: &RbfKernel,
    t: &[f64],
    y: &[f64],
    rng: &mut R,
) -> Result<DVector<f64>, EvalError> {
    let (mean, q, var) = state_posterior_eigen(kernel, t, y)?;
    let z = DVector::from_fn(var.len(), |i, _| var[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
    Ok(mean + q * z)
}

/// GP conditional of one species' time derivatives given its states:
/// `mₙ = ′C C⁻¹ xₙ`, `Kₙ = C″ − ′C C⁻¹ C′`.
#[derive(Debug, Clone)]
pub struct DerivativeConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl DerivativeConditional {
    pub fn new(kernel: &RbfKernel, t: &[f64], x: &[f64]) -> Result<Self, EvalError> {
        check_series(t, x)?;
        kernel.check()?;
        let mut c = kernel.signal_matrix(t);
        for i in 0..t.len() {
            c[(i, i)] += STATE_JITTER * kernel.amplitude;
        }
        let chol = cholesky(c)?;
        let cross = kernel.derivative_cross(t);
        let mean = &cross * chol.solve(&DVector::from_column_slice(x));
        let mut cov = kernel.derivative_auto(t) - &cross * chol.solve(&cross.transpose());
        symmetrize(&mut cov);
        Ok(Self::from_moments(mean, cov))
    }

    /// From an explicit mean and (symmetric PSD) covariance.
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(cov.clone());
        Self {
            mean,
            cov,
            eigenvalues: eig.eigenvalues.map(|l| l.max(0.0)),
            eigenvectors: eig.eigenvectors,
        }
    }

    /// `(Kₙ + γI)⁻¹`.
    pub fn precision(&self, gamma: f64) -> DMatrix<f64> {
        let d = self.eigenvalues.map(|l| 1.0 / (l + gamma));
        &self.eigenvectors * DMatrix::from_diagonal(&d) * self.eigenvectors.transpose()
    }

    /// Coordinates of `v` in the eigenbasis of `Kₙ`.
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(v)
    }
}

/// Metric for `δ = √γ` of one species, `g = 2γ tr(H⁻²)` with `H = K + γI`,
/// and its derivative `dg/dδ`.
pub fn gamma_metric(delta: f64, k: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(k.clone());
    gamma_metric_from_eigenvalues(delta, eig.eigenvalues.iter().map(|l| l.max(0.0)))
}

fn gamma_metric_from_eigenvalues(delta: f64, eigenvalues: impl Iterator<Item = f64>) -> (f64, f64) {
    let gamma = delta * delta;
    let (mut tr2, mut tr3) = (0.0, 0.0);
    for l in eigenvalues {
        let h = 1.0 / (l + gamma);
        tr2 += h * h;
        tr3 += h * h * h;
    }
    (2.0 * gamma * tr2, 4.0 * delta * tr2 - 8.0 * delta.powi(3) * tr3)
}

/// A system `ẋ = f(x, θ, t)` with analytic parameter sensitivities.
pub trait OdeSystem: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_params(&self) -> usize;
    fn vector_field(&self, x: &[f64], theta: &[f64], t: f64) -> Vec<f64>;
    /// `J[n, d] = ∂fₙ/∂θ_d`.
    fn param_jacobian(&self, x: &[f64], theta: &[f64], t: f64) -> DMatrix<f64>;
    /// One `D × D` matrix `∂²fₙ/∂θᵢ∂θ_d` per state `n`.
    fn param_hessians(&self, x: &[f64], theta: &[f64], t: f64) -> Vec<DMatrix<f64>>;
}

/// `V̇ = c(V − V³/3 + R)`, `Ṙ = −(V − a + bR)/c` with `θ = (a, b, c)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitzhughNagumo;

impl OdeSystem for FitzhughNagumo {
    fn n_states(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        3
    }

    fn vector_field(&self, x: &[f64], theta: &[f64], _t: f64) -> Vec<f64> {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        vec![c * (v - v.powi(3) / 3.0 + r), -(v - a + b * r) / c]
    }

    fn param_jacobian(&self, x: &[f64], theta: &[f64], _t: f64) -> DMatrix<f64> {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        DMatrix::from_row_slice(
            2,
            3,
            &[0.0, 0.0, v - v.powi(3) / 3.0 + r, 1.0 / c, -r / c, (v - a + b * r) / (c * c)],
        )
    }

    fn param_hessians(&self, x: &[f64], theta: &[f64], _t: f64) -> Vec<DMatrix<f64>> {
        let (v, r) = (x[0], x[1]);
        let (a, b, c) = (theta[0], theta[1], theta[2]);
        let c2 = c * c;
        let hr = DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                0.0,
                -1.0 / c2,
                0.0,
                0.0,
                r / c2,
                -1.0 / c2,
                r / c2,
                -2.0 * (v - a + b * r) / c.powi(3),
            ],
        );
        vec![DMatrix::zeros(3, 3), hr]
    }
}

/// Classical RK4 solution at `times`, starting from `x0` at `times[0]`, with
/// `substeps` equal steps between consecutive output times.
pub fn solve_rk4<S: OdeSystem + ?Sized>(
    system: &S,
    theta: &[f64],
    x0: &[f64],
    times: &[f64],
    substeps: usize,
) -> DMatrix<f64> {
    let n = system.n_states();
    let mut out = DMatrix::zeros(n, times.len());
    let mut x = DVector::from_column_slice(x0);
    let f = |x: &DVector<f64>, t: f64| DVector::from_vec(system.vector_field(x.as_slice(), theta, t));
    for (k, &t_out) in times.iter().enumerate() {
        if k > 0 {
            let t0 = times[k - 1];
            let h = (t_out - t0) / substeps as f64;
            for s in 0..substeps {
                let t = t0 + s as f64 * h;
                let k1 = f(&x, t);
                let k2 = f(&(&x + &k1 * (h / 2.0)), t + h / 2.0);
                let k3 = f(&(&x + &k2 * (h / 2.0)), t + h / 2.0);
                let k4 = f(&(&x + &k3 * h), t + h);
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        out.set_column(k, &x);
    }
    out
}

/// Noisy observations of an ODE trajectory.
#[derive(Debug, Clone)]
pub struct OdeData {
    pub times: Vec<f64>,
    /// `N × T` observations.
    pub y: DMatrix<f64>,
    /// `N × T` noise-free trajectory.
    pub x_true: DMatrix<f64>,
}

/// Fitzhugh–Nagumo data on `count` evenly spaced times in `[0, t_end]`
/// from `(V, R) = (−1, 1)`, with Gaussian noise whose standard deviation is
/// `noise_fraction` times each species' own standard deviation.
pub fn fhn_data<R: Rng + ?Sized>(
    theta: &[f64],
    count: usize,
    t_end: f64,
    noise_fraction: f64,
    rng: &mut R,
) -> OdeData {
    let times: Vec<f64> = if count == 1 {
        vec![0.0]
    } else {
        (0..count).map(|i| t_end * i as f64 / (count - 1) as f64).collect()
    };
    let x_true = solve_rk4(&FitzhughNagumo, theta, &[-1.0, 1.0], &times, 50);
    let mut y = x_true.clone();
    for n in 0..x_true.nrows() {
        let row = x_true.row(n);
        let mean = row.mean();
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len().max(2).saturating_sub(1) as f64)
            .sqrt();
        for s in 0..x_true.ncols() {
            y[(n, s)] += noise_fraction * sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    OdeData { times, y, x_true }
}

/// Vector field, sensitivities and GP derivative conditionals at fixed
/// states `X`.
#[derive(Debug, Clone)]
pub struct GradientMatching<'a, S: OdeSystem + ?Sized> {
    pub system: &'a S,
    pub times: &'a [f64],
    /// `N × T` states.
    pub x: &'a DMatrix<f64>,
    pub conditionals: &'a [DerivativeConditional],
}

impl<S: OdeSystem + ?Sized> GradientMatching<'_, S> {
    fn state(&self, s: usize) -> Vec<f64> {
        self.x.column(s).iter().copied().collect()
    }

    /// `fₙ − mₙ` for every species.
    pub fn residuals(&self, theta: &[f64]) -> Vec<DVector<f64>> {
        let n = self.system.n_states();
        let t = self.times.len();
        let mut f = DMatrix::zeros(n, t);
        for s in 0..t {
            let v = self.system.vector_field(&self.state(s), theta, self.times[s]);
            for (k, fk) in v.into_iter().enumerate() {
                f[(k, s)] = fk;
            }
        }
        (0..n)
            .map(|k| f.row(k).transpose() - &self.conditionals[k].mean)
            .collect()
    }

    /// `Fₙ[d, s] = ∂fₙ(x_s)/∂θ_d`, one `D × T` matrix per species.
    pub fn sensitivities(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let (n, d, t) = (self.system.n_states(), self.system.n_params(), self.times.len());
        let mut out = vec![DMatrix::zeros(d, t); n];
        for s in 0..t {
            let j = self.system.param_jacobian(&self.state(s), theta, self.times[s]);
            for (k, fk) in out.iter_mut().enumerate() {
                fk.set_column(s, &j.row(k).transpose());
            }
        }
        out
    }

    /// `S[n][i][d, s] = ∂²fₙ(x_s)/∂θᵢ∂θ_d`.
    fn second_sensitivities(&self, theta: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let (n, d, t) = (self.system.n_states(), self.system.n_params(), self.times.len());
        let mut out = vec![vec![DMatrix::zeros(d, t); d]; n];
        for s in 0..t {
            let h = self.system.param_hessians(&self.state(s), theta, self.times[s]);
            for k in 0..n {
                for i in 0..d {
                    out[k][i].set_column(s, &h[k].row(i).transpose());
                }
            }
        }
        out
    }

    /// `U = Σₙ rₙᵀ (Kₙ + γₙI)⁻¹ rₙ`.
    pub fn u_energy(&self, theta: &[f64], gamma: &[f64]) -> f64 {
        self.residuals(theta)
            .iter()
            .zip(self.conditionals)
            .zip(gamma)
            .map(|((r, c), g)| {
                let z = c.project(r);
                z.iter().zip(c.eigenvalues.iter()).map(|(zi, l)| zi * zi / (l + g)).sum::<f64>()
            })
            .sum()
    }

    /// `∇_θ U = 2 Σₙ Fₙ (Kₙ + γₙI)⁻¹ rₙ`.
    pub fn u_grad(&self, theta: &[f64], gamma: &[f64]) -> DVector<f64> {
        let precisions: Vec<DMatrix<f64>> = self.conditionals.iter().zip(gamma).map(|(c, g)| c.precision(*g)).collect();
        self.u_grad_with(theta, &precisions)
    }

    fn u_grad_with(&self, theta: &[f64], precisions: &[DMatrix<f64>]) -> DVector<f64> {
        let r = self.residuals(theta);
        let f = self.sensitivities(theta);
        let mut g = DVector::zeros(self.system.n_params());
        for k in 0..r.len() {
            g += &f[k] * (&precisions[k] * &r[k]) * 2.0;
        }
        g
    }

    /// Approximate Fisher metric `Σₙ Fₙ (Kₙ + γₙI)⁻¹ Fₙᵀ` and its
    /// derivatives.
    pub fn theta_metric(&self, theta: &[f64], gamma: &[f64]) -> Result<MetricBundle, EvalError> {
        let precisions: Vec<DMatrix<f64>> = self.conditionals.iter().zip(gamma).map(|(c, g)| c.precision(*g)).collect();
        self.theta_metric_with(theta, &precisions)
    }

    fn theta_metric_with(&self, theta: &[f64], precisions: &[DMatrix<f64>]) -> Result<MetricBundle, EvalError> {
        let d = self.system.n_params();
        let f = self.sensitivities(theta);
        let s = self.second_sensitivities(theta);
        let mut g = DMatrix::zeros(d, d);
        let mut derivs = vec![DMatrix::zeros(d, d); d];
        for k in 0..f.len() {
            let fh = &f[k] * &precisions[k];
            g += &fh * f[k].transpose();
            for i in 0..d {
                let a = &s[k][i] * fh.transpose();
                derivs[i] += &a + a.transpose();
            }
        }
        symmetrize(&mut g);
        match MetricBundle::dense(g.clone(), MetricDerivs::Dense(derivs.clone())) {
            Ok(b) => Ok(b),
            Err(_) => {
                let jitter = METRIC_JITTER * (g.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
                for i in 0..d {
                    g[(i, i)] += jitter;
                }
                MetricBundle::dense(g, MetricDerivs::Dense(derivs)).map_err(|_| EvalError::NotPositiveDefinite {
                    theta: theta.to_vec(),
                })
            }
        }
    }
}

/// Conditional of `θ` given states, hyperparameters and `γ`:
/// `−U/2 + log π(θ)` with independent `N(0, sd²)` priors.
pub struct ThetaModel<'a, S: OdeSystem + ?Sized> {
    matching: GradientMatching<'a, S>,
    precisions: Vec<DMatrix<f64>>,
    prior_sd: f64,
}

impl<'a, S: OdeSystem + ?Sized> ThetaModel<'a, S> {
    pub fn new(matching: GradientMatching<'a, S>, gamma: &[f64], prior_sd: f64) -> Self {
        let precisions = matching.conditionals.iter().zip(gamma).map(|(c, g)| c.precision(*g)).collect();
        Self {
            matching,
            precisions,
            prior_sd,
        }
    }

    fn check(&self, theta: &ParameterVector) -> Result<(), EvalError> {
        let d = self.matching.system.n_params();
        if theta.len() != d {
            return Err(EvalError::Dimension {
                expected: d,
                got: theta.len(),
            });
        }
        Ok(())
    }
}

impl<S: OdeSystem + ?Sized> TargetModel for ThetaModel<'_, S> {
    fn dim(&self) -> usize {
        self.matching.system.n_params()
    }

    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        self.check(theta)?;
        let r = self.matching.residuals(theta.as_slice());
        let u: f64 = r.iter().zip(&self.precisions).map(|(r, p)| (p * r).dot(r)).sum();
        let l = -0.5 * u - theta.norm_squared() / (2.0 * self.prior_sd * self.prior_sd);
        if l.is_finite() {
            Ok(l)
        } else {
            Err(EvalError::NonFinite {
                what: "log density",
                theta: theta.iter().copied().collect(),
            })
        }
    }

    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        self.check(theta)?;
        let g = self.matching.u_grad_with(theta.as_slice(), &self.precisions) * -0.5
            - theta / (self.prior_sd * self.prior_sd);
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(EvalError::NonFinite {
                what: "gradient",
                theta: theta.iter().copied().collect(),
            })
        }
    }

    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        self.check(theta)?;
        self.matching.theta_metric_with(theta.as_slice(), &self.precisions)
    }

    fn has_metric(&self) -> bool {
        true
    }
}

/// Conditional of `δ = (√γ₁, …, √γ_N)` given `θ`, states and hyperparameters.
///
/// Each species contributes the surrogate Gaussian `N(mₙ | fₙ, Kₙ + γₙI)`,
/// i.e. `−½ rₙᵀHₙ⁻¹rₙ − ½ log|Hₙ|`, plus a `N(0, sd²)` prior on `log γₙ`.
/// Setting `include_normalizer = false` drops the log-determinant and keeps
/// only `−U/2`.
pub struct GammaModel {
    /// Residuals in the eigenbasis of each `Kₙ`.
    projected: Vec<DVector<f64>>,
    eigenvalues: Vec<DVector<f64>>,
    prior_log_sd: f64,
    include_normalizer: bool,
}

impl GammaModel {
    pub fn new<S: OdeSystem + ?Sized>(
        matching: &GradientMatching<'_, S>,
        theta: &[f64],
        prior_log_sd: f64,
        include_normalizer: bool,
    ) -> Self {
        let r = matching.residuals(theta);
        Self {
            projected: r.iter().zip(matching.conditionals).map(|(r, c)| c.project(r)).collect(),
            eigenvalues: matching.conditionals.iter().map(|c| c.eigenvalues.clone()).collect(),
            prior_log_sd,
            include_normalizer,
        }
    }

    fn check(&self, delta: &ParameterVector) -> Result<(), EvalError> {
        if delta.len() != self.projected.len() {
            return Err(EvalError::Dimension {
                expected: self.projected.len(),
                got: delta.len(),
            });
        }
        if delta.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(EvalError::OutOfSupport {
                theta: delta.iter().copied().collect(),
            })
        }
    }

    // Prior on δ implied by log γ = 2 log δ ~ N(0, sd²).
    fn prior(&self, delta: f64) -> (f64, f64) {
        let lg = 2.0 * delta.ln();
        let s2 = self.prior_log_sd * self.prior_log_sd;
        (-lg * lg / (2.0 * s2) - delta.ln(), -2.0 * lg / (s2 * delta) - 1.0 / delta)
    }
}

impl TargetModel for GammaModel {
    fn dim(&self) -> usize {
        self.projected.len()
    }

    fn log_density(&self, delta: &ParameterVector) -> Result<f64, EvalError> {
        self.check(delta)?;
        let mut l = 0.0;
        for (k, d) in delta.iter().enumerate() {
            let gamma = d * d;
            for (z, lam) in self.projected[k].iter().zip(self.eigenvalues[k].iter()) {
                let h = lam + gamma;
                l -= 0.5 * z * z / h;
                if self.include_normalizer {
                    l -= 0.5 * h.ln();
                }
            }
            l += self.prior(*d).0;
        }
        Ok(l)
    }

    fn grad_log_density(&self, delta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        self.check(delta)?;
        Ok(DVector::from_fn(delta.len(), |k, _| {
            let d = delta[k];
            let gamma = d * d;
            let mut g = self.prior(d).1;
            for (z, lam) in self.projected[k].iter().zip(self.eigenvalues[k].iter()) {
                let h = lam + gamma;
                g += d * z * z / (h * h);
                if self.include_normalizer {
                    g -= d / h;
                }
            }
            g
        }))
    }

    /// Diagonal `diag(g(δₙ))`; `∂G/∂δₙ` has the single entry `g′(δₙ)`.
    fn metric(&self, delta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        self.check(delta)?;
        let (g, dg): (Vec<f64>, Vec<f64>) = delta
            .iter()
            .zip(&self.eigenvalues)
            .map(|(d, lam)| gamma_metric_from_eigenvalues(*d, lam.iter().copied()))
            .unzip();
        MetricBundle::dense(DMatrix::from_diagonal(&DVector::from_vec(g)), MetricDerivs::DiagonalEntries(dg))
    }

    fn has_metric(&self) -> bool {
        true
    }
}

/// Prior scales for the full scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpOdePriors {
    /// Standard deviation of the `N(0, sd²)` prior on each `log φ`, `log σ`.
    pub hyper_log_sd: f64,
    /// Standard deviation of the `N(0, sd²)` prior on each `log γₙ`.
    pub gamma_log_sd: f64,
    /// Standard deviation of the `N(0, sd²)` prior on each `θ_d`.
    pub theta_sd: f64,
    /// Keep `−½ log|Kₙ + γₙI|` in the `γ` conditional.
    pub gamma_normalizer: bool,
}

impl Default for GpOdePriors {
    fn default() -> Self {
        Self {
            hyper_log_sd: 10.0,
            gamma_log_sd: 10.0,
            theta_sd: 10.0,
            gamma_normalizer: true,
        }
    }
}

/// Full state of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GpOdeState {
    /// `(φ₁, φ₂, σ)` per species.
    pub hyper: Vec<[f64; 3]>,
    /// `N × T` states.
    pub x: DMatrix<f64>,
    /// `√γₙ` per species.
    pub delta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl GpOdeState {
    /// Rough starting point: amplitude from the sample variance, unit
    /// length scale, noise at 1% of the variance, `δ = 1`, and states at
    /// the posterior mean.
    pub fn initial(times: &[f64], y: &DMatrix<f64>, theta: Vec<f64>) -> Result<Self, EvalError> {
        let n = y.nrows();
        let mut hyper = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, y.ncols());
        for k in 0..n {
            let row: Vec<f64> = y.row(k).iter().copied().collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64).max(1e-6);
            let h = [var, 1.0, 0.01 * var];
            let (m, _) = state_posterior(&RbfKernel::from_slice(&h), times, &row)?;
            x.set_row(k, &m.transpose());
            hyper.push(h);
        }
        Ok(Self {
            hyper,
            x,
            delta: vec![1.0; n],
            theta,
        })
    }
}

/// Kernels for each block of the sweep.
#[derive(Debug, Clone)]
pub struct GpOdeConfig {
    pub hyper: KernelConfig,
    pub gamma: KernelConfig,
    pub theta: KernelConfig,
    pub priors: GpOdePriors,
}

/// Failure inside a sweep, tagged with the block that raised it.
#[derive(Debug, Error)]
#[error("{stage}: {source}")]
pub struct SweepError {
    pub stage: String,
    #[source]
    pub source: SamplerError,
}

fn stage<T>(name: impl Into<String>, r: Result<T, SamplerError>) -> Result<T, SweepError> {
    r.map_err(|source| SweepError {
        stage: name.into(),
        source,
    })
}

fn eval_stage<T>(name: impl Into<String>, r: Result<T, EvalError>) -> Result<T, SweepError> {
    stage(name, r.map_err(SamplerError::Eval))
}

/// Acceptance of each block in one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GpOdeAcceptance {
    pub hyper: Vec<bool>,
    pub gamma: bool,
    pub theta: bool,
    /// Hamiltonian after the θ transition (HMC family).
    pub theta_energy: Option<f64>,
}

/// The four-stage sweep.
pub struct GpOdeSampler<'a, S: OdeSystem> {
    pub system: &'a S,
    pub times: &'a [f64],
    /// `N × T` observations.
    pub y: &'a DMatrix<f64>,
    pub priors: GpOdePriors,
    hyper_kernels: Vec<Kernel>,
    gamma_kernel: Kernel,
    theta_kernel: Kernel,
}

impl<'a, S: OdeSystem> GpOdeSampler<'a, S> {
    pub fn new(
        system: &'a S,
        times: &'a [f64],
        y: &'a DMatrix<f64>,
        config: &GpOdeConfig,
        state: &GpOdeState,
    ) -> Result<Self, SweepError> {
        let n = system.n_states();
        if y.nrows() != n || y.ncols() != times.len() {
            return stage(
                "setup",
                Err(SamplerError::Config(format!(
                    "observations are {}×{}, expected {}×{}",
                    y.nrows(),
                    y.ncols(),
                    n,
                    times.len()
                ))),
            );
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|k| y.row(k).iter().copied().collect()).collect();
        let mut hyper_kernels = Vec::with_capacity(n);
        for row in &rows {
            let model = GpHyperModel {
                times,
                y: row,
                prior_log_sd: config.priors.hyper_log_sd,
            };
            hyper_kernels.push(stage("gp hyperparameters", Kernel::new(&config.hyper, &model))?);
        }
        let conditionals = eval_stage("states", conditionals(times, state))?;
        let matching = GradientMatching {
            system,
            times,
            x: &state.x,
            conditionals: &conditionals,
        };
        let gm = GammaModel::new(&matching, &state.theta, config.priors.gamma_log_sd, config.priors.gamma_normalizer);
        let gamma_kernel = stage("mismatch variance", Kernel::new(&config.gamma, &gm))?;
        let gamma: Vec<f64> = state.delta.iter().map(|d| d * d).collect();
        let tm = ThetaModel::new(matching, &gamma, config.priors.theta_sd);
        let theta_kernel = stage("ode parameters", Kernel::new(&config.theta, &tm))?;
        Ok(Self {
            system,
            times,
            y,
            priors: config.priors,
            hyper_kernels,
            gamma_kernel,
            theta_kernel,
        })
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, state: &mut GpOdeState, rng: &mut R) -> Result<GpOdeAcceptance, SweepError> {
        let n = self.system.n_states();
        let mut hyper_acc = Vec::with_capacity(n);
        for k in 0..n {
            let label = || format!("gp hyperparameters (species {k})");
            let row: Vec<f64> = self.y.row(k).iter().copied().collect();
            let model = GpHyperModel {
                times: self.times,
                y: &row,
                prior_log_sd: self.priors.hyper_log_sd,
            };
            let kernel = &mut self.hyper_kernels[k];
            let start = stage(
                label(),
                kernel
                    .prepare(&model, DVector::from_column_slice(&state.hyper[k]))
                    .map_err(SamplerError::InvalidStart),
            )?;
            let t = stage(label(), kernel.transition(&model, start, rng))?;
            state.hyper[k].copy_from_slice(t.point.theta.as_slice());
            hyper_acc.push(t.accepted);

            let draw = eval_stage(
                format!("states (species {k})"),
                sample_states(&RbfKernel::from_slice(&state.hyper[k]), self.times, &row, rng),
            )?;
            state.x.set_row(k, &draw.transpose());
        }

        let conditionals = eval_stage("states", conditionals(self.times, state))?;
        let matching = GradientMatching {
            system: self.system,
            times: self.times,
            x: &state.x,
            conditionals: &conditionals,
        };

        let gm = GammaModel::new(&matching, &state.theta, self.priors.gamma_log_sd, self.priors.gamma_normalizer);
        let start = stage(
            "mismatch variance",
            self.gamma_kernel
                .prepare(&gm, DVector::from_column_slice(&state.delta))
                .map_err(SamplerError::InvalidStart),
        )?;
        let t = stage("mismatch variance", self.gamma_kernel.transition(&gm, start, rng))?;
        state.delta.copy_from_slice(t.point.theta.as_slice());
        let gamma_acc = t.accepted;

        let gamma: Vec<f64> = state.delta.iter().map(|d| d * d).collect();
        let tm = ThetaModel::new(matching, &gamma, self.priors.theta_sd);
        let start = stage(
            "ode parameters",
            self.theta_kernel
                .prepare(&tm, DVector::from_column_slice(&state.theta))
                .map_err(SamplerError::InvalidStart),
        )?;
        let t = stage("ode parameters", self.theta_kernel.transition(&tm, start, rng))?;
        state.theta.copy_from_slice(t.point.theta.as_slice());

        Ok(GpOdeAcceptance {
            hyper: hyper_acc,
            gamma: gamma_acc,
            theta: t.accepted,
            theta_energy: t.energy,
        })
    }

    fn tune(&mut self, acc: &GpOdeAcceptance) {
        for (k, a) in self.hyper_kernels.iter_mut().zip(&acc.hyper) {
            k.tune(*a);
        }
        self.gamma_kernel.tune(acc.gamma);
        self.theta_kernel.tune(acc.theta);
    }

    fn freeze(&mut self) {
        for k in &mut self.hyper_kernels {
            k.freeze();
        }
        self.gamma_kernel.freeze();
        self.theta_kernel.freeze();
    }
}

fn conditionals(times: &[f64], state: &GpOdeState) -> Result<Vec<DerivativeConditional>, EvalError> {
    state
        .hyper
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let x: Vec<f64> = state.x.row(k).iter().copied().collect();
            DerivativeConditional::new(&RbfKernel::from_slice(h), times, &x)
        })
        .collect()
}

/// One sweep with an existing sampler.
pub fn full_scheme_sweep<S: OdeSystem, R: Rng + ?Sized>(
    sampler: &mut GpOdeSampler<'_, S>,
    state: &mut GpOdeState,
    rng: &mut R,
) -> Result<GpOdeAcceptance, SweepError> {
    sampler.sweep(state, rng)
}

/// Retained draws of a full-scheme run.
#[derive(Debug, Clone)]
pub struct GpOdeRun {
    /// One row per retained sweep.
    pub theta: DMatrix<f64>,
    /// `(φ₁, φ₂, σ)` of each species, concatenated.
    pub hyper: DMatrix<f64>,
    /// `γₙ` per species.
    pub gamma: DMatrix<f64>,
    /// Per-sweep acceptance of the θ block.
    pub theta_accepted: Vec<bool>,
    /// Per-sweep θ-block Hamiltonian, when the kernel records one.
    pub theta_energies: Option<Vec<f64>>,
    pub hyper_acceptance: Vec<f64>,
    pub gamma_acceptance: f64,
    pub theta_acceptance: f64,
    pub burn_in_seconds: f64,
    pub sampling_seconds: f64,
    pub final_state: GpOdeState,
}

pub fn run_gpode<S: OdeSystem, R: Rng + ?Sized>(
    sampler: &mut GpOdeSampler<'_, S>,
    mut state: GpOdeState,
    burn_in: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<GpOdeRun, SweepError> {
    let start = Instant::now();
    for _ in 0..burn_in {
        let acc = sampler.sweep(&mut state, rng)?;
        sampler.tune(&acc);
    }
    sampler.freeze();
    let burn_in_seconds = start.elapsed().as_secs_f64();

    let n = state.hyper.len();
    let d = state.theta.len();
    let start = Instant::now();
    let mut theta = DMatrix::zeros(n_samples, d);
    let mut hyper = DMatrix::zeros(n_samples, 3 * n);
    let mut gamma = DMatrix::zeros(n_samples, n);
    let mut hyper_acc = vec![0usize; n];
    let (mut ga, mut ta) = (0usize, 0usize);
    let mut theta_accepted = Vec::with_capacity(n_samples);
    let mut energies = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let acc = sampler.sweep(&mut state, rng)?;
        theta_accepted.push(acc.theta);
        energies.push(acc.theta_energy);
        for (c, a) in hyper_acc.iter_mut().zip(&acc.hyper) {
            *c += usize::from(*a);
        }
        ga += usize::from(acc.gamma);
        ta += usize::from(acc.theta);
        for (j, v) in state.theta.iter().enumerate() {
            theta[(i, j)] = *v;
        }
        for (k, h) in state.hyper.iter().enumerate() {
            for (j, v) in h.iter().enumerate() {
                hyper[(i, 3 * k + j)] = *v;
            }
            gamma[(i, k)] = state.delta[k] * state.delta[k];
        }
    }
    let rate = |c: usize| if n_samples == 0 { 0.0 } else { c as f64 / n_samples as f64 };
    Ok(GpOdeRun {
        theta,
        hyper,
        gamma,
        theta_accepted,
        theta_energies: energies.into_iter().collect(),
        hyper_acceptance: hyper_acc.into_iter().map(rate).collect(),
        gamma_acceptance: rate(ga),
        theta_acceptance: rate(ta),
        burn_in_seconds,
        sampling_seconds: start.elapsed().as_secs_f64(),
        final_state: state,
    })
}

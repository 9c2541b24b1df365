//! Chain drivers: component-wise adaptive Metropolis, MALA, HMC and RM-HMC.
//!
//! Every sampler is a [`Kernel`] that maps an evaluated current point to the
//! next one. [`run_chain`] drives a kernel through burn-in (with tuning) and
//! sampling, recording a [`ChainTrace`]. Kernels are also usable one
//! transition at a time, which is how the Gibbs-style model sweeps use them.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{EvalError, SamplerError};
use crate::integrators::{leapfrog_trajectory, manifold_trajectory, IntegratorConfig, Scheme};
use crate::metric::MetricBundle;
use crate::model::{ParameterVector, PointEval, TargetModel};

/// Iterations per tuning window during burn-in.
pub const ADAPT_WINDOW: usize = 100;
/// Multiplicative step-size adjustment applied once per window.
pub const ADAPT_FACTOR: f64 = 1.2;

/// Per-kernel settings.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelConfig {
    /// Component-wise random walk with per-coordinate scales.
    Metropolis {
        initial_scale: f64,
        target: (f64, f64),
    },
    Mala {
        /// Step size used during burn-in (and afterwards unless
        /// `h_stationary` is set).
        h: f64,
        /// Step size switched to once burn-in ends.
        h_stationary: Option<f64>,
        autotune: bool,
        target: (f64, f64),
    },
    Hmc {
        integrator: IntegratorConfig,
        /// Mass matrix; identity when absent.
        mass: Option<DMatrix<f64>>,
    },
    RmHmc {
        integrator: IntegratorConfig,
    },
}

impl KernelConfig {
    pub fn metropolis(initial_scale: f64) -> Self {
        KernelConfig::Metropolis {
            initial_scale,
            target: (0.2, 0.4),
        }
    }

    pub fn mala(h: f64) -> Self {
        KernelConfig::Mala {
            h,
            h_stationary: None,
            autotune: true,
            target: (0.4, 0.6),
        }
    }

    pub fn hmc(integrator: IntegratorConfig) -> Self {
        KernelConfig::Hmc {
            integrator,
            mass: None,
        }
    }

    pub fn rmhmc(integrator: IntegratorConfig) -> Self {
        KernelConfig::RmHmc { integrator }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelConfig::Metropolis { .. } => "metropolis",
            KernelConfig::Mala { .. } => "mala",
            KernelConfig::Hmc { .. } => "hmc",
            KernelConfig::RmHmc { .. } => "rmhmc",
        }
    }

    /// Whether traces from this kernel carry an energy column.
    pub fn records_energy(&self) -> bool {
        matches!(self, KernelConfig::Hmc { .. } | KernelConfig::RmHmc { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub burn_in: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
    /// Starting point; the model's default when absent.
    pub initial: Option<Vec<f64>>,
}

impl SamplerConfig {
    pub fn new(kernel: KernelConfig, burn_in: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            burn_in,
            n_samples,
            seed,
            kernel,
            initial: None,
        }
    }
}

/// Outcome of one kernel transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub point: PointEval,
    pub accepted: bool,
    /// Hamiltonian of the retained phase-space point (HMC family).
    pub energy: Option<f64>,
    /// Set when the proposal was abandoned because of a numerical failure.
    pub failure: Option<EvalError>,
}

/// A Markov transition kernel on one target.
#[derive(Debug, Clone)]
pub enum Kernel {
    Metropolis(MetropolisKernel),
    Mala(MalaKernel),
    Hmc(HmcKernel),
    RmHmc(RmHmcKernel),
}

impl Kernel {
    /// Build a kernel for `model`, checking that the model supports it.
    pub fn new<M: TargetModel + ?Sized>(config: &KernelConfig, model: &M) -> Result<Self, SamplerError> {
        let d = model.dim();
        match config {
            KernelConfig::Metropolis {
                initial_scale,
                target,
            } => {
                positive("initial_scale", *initial_scale)?;
                Ok(Kernel::Metropolis(MetropolisKernel {
                    scales: vec![*initial_scale; d],
                    target: *target,
                    window_accepts: vec![0; d],
                    window_len: 0,
                    total_accepts: vec![0; d],
                    total_len: 0,
                    adapting: true,
                }))
            }
            KernelConfig::Mala {
                h,
                h_stationary,
                autotune,
                target,
            } => {
                positive("h", *h)?;
                if let Some(hs) = h_stationary {
                    positive("h_stationary", *hs)?;
                }
                Ok(Kernel::Mala(MalaKernel {
                    h: *h,
                    h_stationary: *h_stationary,
                    autotune: *autotune,
                    target: *target,
                    window_accepts: 0,
                    window_len: 0,
                    adapting: true,
                }))
            }
            KernelConfig::Hmc { integrator, mass } => {
                integrator.validate().map_err(SamplerError::Config)?;
                let m = mass.clone().unwrap_or_else(|| DMatrix::identity(d, d));
                if m.nrows() != d || m.ncols() != d {
                    return Err(SamplerError::Config(format!(
                        "mass matrix is {}x{}, model dimension is {d}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                let mass = MetricBundle::constant(m)
                    .map_err(|_| SamplerError::Config("mass matrix is not positive definite".into()))?;
                Ok(Kernel::Hmc(HmcKernel {
                    integrator: integrator.clone(),
                    mass: Arc::new(mass),
                }))
            }
            KernelConfig::RmHmc { integrator } => {
                integrator.validate().map_err(SamplerError::Config)?;
                if !model.has_metric() {
                    return Err(SamplerError::Config(
                        "rmhmc needs a model with a metric tensor".into(),
                    ));
                }
                if integrator.scheme == Scheme::Leapfrog && !model.constant_metric() {
                    return Err(SamplerError::Config(
                        "leapfrog scheme requires a constant metric; use scheme1 or scheme2".into(),
                    ));
                }
                Ok(Kernel::RmHmc(RmHmcKernel {
                    integrator: integrator.clone(),
                }))
            }
        }
    }

    /// Evaluate `theta` to the depth this kernel needs.
    pub fn prepare<M: TargetModel + ?Sized>(&self, model: &M, theta: ParameterVector) -> Result<PointEval, EvalError> {
        match self {
            Kernel::Metropolis(_) => PointEval::value(model, theta),
            Kernel::Mala(_) | Kernel::Hmc(_) => PointEval::with_grad(model, theta),
            Kernel::RmHmc(_) => PointEval::with_metric(model, theta, None),
        }
    }

    pub fn transition<M: TargetModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        current: PointEval,
        rng: &mut R,
    ) -> Result<Transition, SamplerError> {
        match self {
            Kernel::Metropolis(k) => k.transition(model, current, rng),
            Kernel::Mala(k) => k.transition(model, current, rng),
            Kernel::Hmc(k) => k.transition(model, current, rng),
            Kernel::RmHmc(k) => k.transition(model, current, rng),
        }
    }

    /// Called after every burn-in iteration; adapts step sizes at window
    /// boundaries.
    pub fn tune(&mut self, accepted: bool) {
        match self {
            Kernel::Metropolis(k) => k.tune(),
            Kernel::Mala(k) => k.tune(accepted),
            Kernel::Hmc(_) | Kernel::RmHmc(_) => {}
        }
    }

    /// Stop adapting and switch to stationary settings.
    pub fn freeze(&mut self) {
        match self {
            Kernel::Metropolis(k) => {
                k.adapting = false;
                k.total_accepts.iter_mut().for_each(|a| *a = 0);
                k.total_len = 0;
            }
            Kernel::Mala(k) => {
                k.adapting = false;
                if let Some(hs) = k.h_stationary {
                    k.h = hs;
                }
            }
            Kernel::Hmc(_) | Kernel::RmHmc(_) => {}
        }
    }

    /// Current step-size parameters, for reporting.
    pub fn step_sizes(&self) -> Vec<f64> {
        match self {
            Kernel::Metropolis(k) => k.scales.clone(),
            Kernel::Mala(k) => vec![k.h],
            Kernel::Hmc(k) => vec![k.integrator.epsilon],
            Kernel::RmHmc(k) => vec![k.integrator.epsilon],
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), SamplerError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SamplerError::Config(format!("{name} must be positive, got {v}")))
    }
}

/// Accept with probability `min(1, exp(log_ratio))`. Always consumes one
/// uniform so that the random stream does not depend on the ratio.
fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    log_ratio.is_finite() && (log_ratio >= 0.0 || u.ln() < log_ratio)
}

fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn recoverable(e: EvalError) -> Result<EvalError, SamplerError> {
    if e.is_recoverable() {
        Ok(e)
    } else {
        Err(SamplerError::Eval(e))
    }
}

#[derive(Debug, Clone)]
pub struct MetropolisKernel {
    scales: Vec<f64>,
    target: (f64, f64),
    window_accepts: Vec<usize>,
    window_len: usize,
    total_accepts: Vec<usize>,
    total_len: usize,
    adapting: bool,
}

impl MetropolisKernel {
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Per-coordinate acceptance rates since the last freeze.
    pub fn coordinate_acceptance(&self) -> Vec<f64> {
        self.total_accepts
            .iter()
            .map(|&a| if self.total_len == 0 { 0.0 } else { a as f64 / self.total_len as f64 })
            .collect()
    }

    fn transition<M: TargetModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        current: PointEval,
        rng: &mut R,
    ) -> Result<Transition, SamplerError> {
        let mut point = current;
        let mut any = false;
        let mut failure = None;
        for k in 0..point.theta.len() {
            let z: f64 = rng.sample(StandardNormal);
            let mut theta = point.theta.clone();
            theta[k] += self.scales[k] * z;
            let proposal = PointEval::value(model, theta);
            let (ratio, prop) = match proposal {
                Ok(p) => (p.log_density - point.log_density, Some(p)),
                Err(e) => {
                    failure = Some(recoverable(e)?);
                    (f64::NEG_INFINITY, None)
                }
            };
            let accept = metropolis_accept(ratio, rng);
            if accept {
                point = prop.expect("accepted proposal was evaluated");
                any = true;
                self.window_accepts[k] += 1;
                self.total_accepts[k] += 1;
            }
        }
        self.window_len += 1;
        self.total_len += 1;
        Ok(Transition {
            point,
            accepted: any,
            energy: None,
            failure,
        })
    }

    fn tune(&mut self) {
        if !self.adapting || self.window_len < ADAPT_WINDOW {
            return;
        }
        for (k, scale) in self.scales.iter_mut().enumerate() {
            let rate = self.window_accepts[k] as f64 / self.window_len as f64;
            if rate < self.target.0 {
                *scale /= ADAPT_FACTOR;
            } else if rate > self.target.1 {
                *scale *= ADAPT_FACTOR;
            }
            self.window_accepts[k] = 0;
        }
        self.window_len = 0;
    }
}

#[derive(Debug, Clone)]
pub struct MalaKernel {
    h: f64,
    h_stationary: Option<f64>,
    autotune: bool,
    target: (f64, f64),
    window_accepts: usize,
    window_len: usize,
    adapting: bool,
}

impl MalaKernel {
    pub fn h(&self) -> f64 {
        self.h
    }

    fn transition<M: TargetModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        current: PointEval,
        rng: &mut R,
    ) -> Result<Transition, SamplerError> {
        let h = self.h;
        let d = current.theta.len();
        let z = standard_normal(d, rng);
        let mean = &current.theta + current.grad() * (0.5 * h);
        let theta = &mean + z * h.sqrt();
        let (ratio, proposal, failure) = match PointEval::with_grad(model, theta) {
            Ok(prop) => {
                let reverse_mean = &prop.theta + prop.grad() * (0.5 * h);
                // log q(θ | θ*) − log q(θ* | θ)
                let log_q_reverse = -(&current.theta - reverse_mean).norm_squared() / (2.0 * h);
                let log_q_forward = -(&prop.theta - &mean).norm_squared() / (2.0 * h);
                let ratio = prop.log_density - current.log_density + log_q_reverse - log_q_forward;
                (ratio, Some(prop), None)
            }
            Err(e) => (f64::NEG_INFINITY, None, Some(recoverable(e)?)),
        };
        let accepted = metropolis_accept(ratio, rng);
        let point = if accepted {
            proposal.expect("accepted proposal was evaluated")
        } else {
            current
        };
        Ok(Transition {
            point,
            accepted,
            energy: None,
            failure,
        })
    }

    fn tune(&mut self, accepted: bool) {
        if !self.adapting || !self.autotune {
            return;
        }
        self.window_len += 1;
        if accepted {
            self.window_accepts += 1;
        }
        if self.window_len < ADAPT_WINDOW {
            return;
        }
        let rate = self.window_accepts as f64 / self.window_len as f64;
        if rate < self.target.0 {
            self.h /= ADAPT_FACTOR;
        } else if rate > self.target.1 {
            self.h *= ADAPT_FACTOR;
        }
        self.window_accepts = 0;
        self.window_len = 0;
    }
}

#[derive(Debug, Clone)]
pub struct HmcKernel {
    integrator: IntegratorConfig,
    mass: Arc<MetricBundle>,
}

impl HmcKernel {
    fn transition<M: TargetModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        current: PointEval,
        rng: &mut R,
    ) -> Result<Transition, SamplerError> {
        let p0 = self.mass.sample(rng);
        let h0 = -current.log_density + 0.5 * self.mass.inverse_quadratic(&p0);
        let outcome = leapfrog_trajectory(model, &current, &p0, &self.integrator, &self.mass);
        let (ratio, proposal, failure) = match outcome {
            Ok((end, p)) => {
                let h1 = -end.log_density + 0.5 * self.mass.inverse_quadratic(&p);
                (h0 - h1, Some((end, h1)), None)
            }
            Err(e) => (f64::NEG_INFINITY, None, Some(recoverable(e)?)),
        };
        let accepted = metropolis_accept(ratio, rng);
        Ok(match (accepted, proposal) {
            (true, Some((end, h1))) => Transition {
                point: end,
                accepted: true,
                energy: Some(h1),
                failure,
            },
            _ => Transition {
                point: current,
                accepted: false,
                energy: Some(h0),
                failure,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct RmHmcKernel {
    integrator: IntegratorConfig,
}

impl RmHmcKernel {
    fn transition<M: TargetModel + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &M,
        current: PointEval,
        rng: &mut R,
    ) -> Result<Transition, SamplerError> {
        let p0 = current.bundle().sample(rng);
        let h0 = current.hamiltonian(&p0);
        let outcome = manifold_trajectory(model, &current, &p0, &self.integrator);
        let (ratio, proposal, failure) = match outcome {
            Ok((end, p)) => {
                let h1 = end.hamiltonian(&p);
                (h0 - h1, Some((end, h1)), None)
            }
            Err(e) => (f64::NEG_INFINITY, None, Some(recoverable(e)?)),
        };
        let accepted = metropolis_accept(ratio, rng);
        Ok(match (accepted, proposal) {
            (true, Some((end, h1))) => Transition {
                point: end,
                accepted: true,
                energy: Some(h1),
                failure,
            },
            _ => Transition {
                point: current,
                accepted: false,
                energy: Some(h0),
                failure,
            },
        })
    }
}

/// Recorded output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub sampler: &'static str,
    /// `n_samples × D`, one row per retained iteration.
    pub samples: DMatrix<f64>,
    pub accepted: Vec<bool>,
    /// Per-iteration Hamiltonian (HMC family only).
    pub energies: Option<Vec<f64>>,
    pub log_densities: Vec<f64>,
    pub burn_in_log_densities: Vec<f64>,
    pub burn_in_seconds: f64,
    pub sampling_seconds: f64,
    pub acceptance_rate: f64,
    /// Proposals abandoned because of numerical failure.
    pub failures: usize,
    /// Step sizes in force after burn-in.
    pub final_step_sizes: Vec<f64>,
}

impl ChainTrace {
    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn wall_time(&self) -> f64 {
        self.burn_in_seconds + self.sampling_seconds
    }

    /// Samples of coordinate `k` in chain order.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.samples.column(k).iter().copied().collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len().max(1) as f64;
        DVector::from_fn(self.dim(), |k, _| self.samples.column(k).sum() / n)
    }
}

/// Run a chain with the kernel described by `config`, seeding a fresh RNG
/// from `config.seed`.
pub fn run_chain<M: TargetModel + ?Sized>(model: &M, config: &SamplerConfig) -> Result<ChainTrace, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_chain_with(model, config, &mut rng)
}

/// Run a chain drawing randomness from `rng`.
pub fn run_chain_with<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace, SamplerError> {
    let d = model.dim();
    let mut kernel = Kernel::new(&config.kernel, model)?;
    let theta0 = match &config.initial {
        Some(v) => {
            if v.len() != d {
                return Err(SamplerError::Config(format!(
                    "initial point has {} entries, model dimension is {d}",
                    v.len()
                )));
            }
            DVector::from_column_slice(v)
        }
        None => model.initial_point(),
    };
    let mut current = kernel.prepare(model, theta0).map_err(SamplerError::InvalidStart)?;
    let mut failures = 0;

    let start = Instant::now();
    let mut burn_in_log_densities = Vec::with_capacity(config.burn_in);
    for _ in 0..config.burn_in {
        let t = kernel.transition(model, current, rng)?;
        failures += usize::from(t.failure.is_some());
        kernel.tune(t.accepted);
        burn_in_log_densities.push(t.point.log_density);
        current = t.point;
    }
    kernel.freeze();
    let burn_in_seconds = start.elapsed().as_secs_f64();

    let n = config.n_samples;
    let start = Instant::now();
    let mut samples = DMatrix::zeros(n, d);
    let mut accepted = Vec::with_capacity(n);
    let mut energies = config.kernel.records_energy().then(|| Vec::with_capacity(n));
    let mut log_densities = Vec::with_capacity(n);
    for i in 0..n {
        let t = kernel.transition(model, current, rng)?;
        failures += usize::from(t.failure.is_some());
        samples.row_mut(i).copy_from(&t.point.theta.transpose());
        accepted.push(t.accepted);
        if let (Some(e), Some(v)) = (energies.as_mut(), t.energy) {
            e.push(v);
        }
        log_densities.push(t.point.log_density);
        current = t.point;
    }
    let sampling_seconds = start.elapsed().as_secs_f64();
    let acceptance_rate = if n == 0 {
        0.0
    } else {
        accepted.iter().filter(|a| **a).count() as f64 / n as f64
    };

    Ok(ChainTrace {
        sampler: config.kernel.name(),
        samples,
        accepted,
        energies,
        log_densities,
        burn_in_log_densities,
        burn_in_seconds,
        sampling_seconds,
        acceptance_rate,
        failures,
        final_step_sizes: kernel.step_sizes(),
    })
}

fn expect_kernel(config: &SamplerConfig, name: &str) -> Result<(), SamplerError> {
    if config.kernel.name() == name {
        Ok(())
    } else {
        Err(SamplerError::Config(format!(
            "expected a {name} configuration, got {}",
            config.kernel.name()
        )))
    }
}

pub fn run_metropolis<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace, SamplerError> {
    expect_kernel(config, "metropolis")?;
    run_chain_with(model, config, rng)
}

pub fn run_mala<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace, SamplerError> {
    expect_kernel(config, "mala")?;
    run_chain_with(model, config, rng)
}

pub fn run_hmc<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace, SamplerError> {
    expect_kernel(config, "hmc")?;
    run_chain_with(model, config, rng)
}

pub fn run_rmhmc<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainTrace, SamplerError> {
    expect_kernel(config, "rmhmc")?;
    run_chain_with(model, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accept_rule_matches_hand_values() {
        // exp(-0.5) ≈ 0.6065: a uniform of 0.6 accepts, 0.61 rejects.
        struct Fixed(f64);
        impl rand::RngCore for Fixed {
            fn next_u32(&mut self) -> u32 {
                (self.0 * u32::MAX as f64) as u32
            }
            fn next_u64(&mut self) -> u64 {
                (self.0 * (1u64 << 53) as f64) as u64 * (1 << 11)
            }
            fn fill_bytes(&mut self, _: &mut [u8]) {
                unimplemented!()
            }
        }
        let h0 = 1.0;
        let h1 = 1.5;
        assert!(metropolis_accept(h0 - h1, &mut Fixed(0.60)));
        assert!(!metropolis_accept(h0 - h1, &mut Fixed(0.61)));
        assert!(metropolis_accept(0.3, &mut Fixed(0.99)));
        assert!(!metropolis_accept(f64::NAN, &mut Fixed(0.0)));
    }
}

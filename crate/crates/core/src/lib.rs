//! Geometric MCMC: Riemannian manifold HMC with a semi-explicit integrator,
//! plus Metropolis, MALA and HMC baselines and chain diagnostics.

pub mod diagnostics;
pub mod error;
pub mod finite_diff;
pub mod integrators;
pub mod linalg;
pub mod metric;
pub mod model;
pub mod samplers;
pub mod toy;

pub use diagnostics::{autocorr, ess, split_rhat, DiagnosticsError, EssReport};
pub use error::{EvalError, SamplerError};
pub use integrators::{IntegratorConfig, Scheme};
pub use linalg::{SpdFactor, SpdMatrix};
pub use metric::{MetricBundle, MetricDerivs};
pub use model::{
    a_matrices, draw_momentum, grad_phi, hamiltonian, MomentumVector, ParameterVector, PhaseState, PointEval,
    TargetModel,
};
pub use samplers::{
    run_chain, run_chain_with, run_hmc, run_mala, run_metropolis, run_rmhmc, ChainTrace, Kernel, KernelConfig,
    SamplerConfig, Transition,
};

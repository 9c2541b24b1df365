//! The target-model contract and Hamiltonian assembly.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::EvalError;
use crate::metric::MetricBundle;

/// A point θ in parameter space.
pub type ParameterVector = DVector<f64>;
/// A momentum p conjugate to θ.
pub type MomentumVector = DVector<f64>;

/// A differentiable (unnormalized) log density with optional Riemannian
/// geometry.
///
/// Implementations must be pure: evaluations are called concurrently from
/// several chains.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `L(θ)`, up to an additive constant.
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError>;

    /// `∇L(θ)`.
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError>;

    /// Both at once; override when the two share work.
    fn log_density_and_grad(
        &self,
        theta: &ParameterVector,
    ) -> Result<(f64, DVector<f64>), EvalError> {
        Ok((self.log_density(theta)?, self.grad_log_density(theta)?))
    }

    /// `G(θ)` with its derivatives.
    fn metric(&self, _theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        Err(EvalError::Unsupported("a metric tensor"))
    }

    /// Whether `metric` is implemented.
    fn has_metric(&self) -> bool {
        false
    }

    /// True when `∂G/∂θᵢ ≡ 0`, so one metric evaluation serves every point.
    fn constant_metric(&self) -> bool {
        false
    }

    /// Default starting point for chains.
    fn initial_point(&self) -> ParameterVector {
        DVector::zeros(self.dim())
    }
}

impl<T: TargetModel + ?Sized> TargetModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        (**self).log_density(theta)
    }
    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        (**self).grad_log_density(theta)
    }
    fn log_density_and_grad(
        &self,
        theta: &ParameterVector,
    ) -> Result<(f64, DVector<f64>), EvalError> {
        (**self).log_density_and_grad(theta)
    }
    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        (**self).metric(theta)
    }
    fn has_metric(&self) -> bool {
        (**self).has_metric()
    }
    fn constant_metric(&self) -> bool {
        (**self).constant_metric()
    }
    fn initial_point(&self) -> ParameterVector {
        (**self).initial_point()
    }
}

pub(crate) fn check_dim(model: &(impl TargetModel + ?Sized), v: &DVector<f64>) -> Result<(), EvalError> {
    if v.len() != model.dim() {
        return Err(EvalError::Dimension {
            expected: model.dim(),
            got: v.len(),
        });
    }
    Ok(())
}

/// `φ(θ) = −L(θ) + ½ log((2π)^D |G(θ)|)`.
pub fn potential(log_density: f64, bundle: &MetricBundle) -> f64 {
    let d = bundle.dim() as f64;
    -log_density + 0.5 * (d * (2.0 * PI).ln() + bundle.logdet())
}

/// `H(θ, p) = φ(θ) + ½ pᵀ G(θ)⁻¹ p` given a precomputed log density and metric.
pub fn hamiltonian_at(log_density: f64, bundle: &MetricBundle, p: &MomentumVector) -> f64 {
    potential(log_density, bundle) + 0.5 * bundle.inverse_quadratic(p)
}

/// The manifold Hamiltonian at `(θ, p)`.
pub fn hamiltonian<M: TargetModel + ?Sized>(
    theta: &ParameterVector,
    p: &MomentumVector,
    model: &M,
) -> Result<f64, EvalError> {
    check_dim(model, theta)?;
    check_dim(model, p)?;
    let l = model.log_density(theta)?;
    if !l.is_finite() {
        return Err(EvalError::non_finite("log density", theta));
    }
    let bundle = model.metric(theta)?;
    let h = hamiltonian_at(l, &bundle, p);
    if !h.is_finite() {
        return Err(EvalError::non_finite("hamiltonian", theta));
    }
    Ok(h)
}

/// `∂φ/∂θᵢ = −∂L/∂θᵢ + ½ Tr[G⁻¹ ∂G/∂θᵢ]` from precomputed pieces.
pub fn grad_phi_at(grad_log_density: &DVector<f64>, bundle: &MetricBundle) -> DVector<f64> {
    if bundle.is_constant() {
        return -grad_log_density;
    }
    let trace = bundle.trace_terms();
    -grad_log_density + trace * 0.5
}

/// Position gradient of the potential φ.
pub fn grad_phi<M: TargetModel + ?Sized>(
    theta: &ParameterVector,
    model: &M,
) -> Result<DVector<f64>, EvalError> {
    check_dim(model, theta)?;
    let g = model.grad_log_density(theta)?;
    let bundle = model.metric(theta)?;
    Ok(grad_phi_at(&g, &bundle))
}

/// Dense `Aᵏ = ½ G⁻¹ (∂G/∂θₖ) G⁻¹` for every k.
pub fn a_matrices(bundle: &MetricBundle) -> Vec<DMatrix<f64>> {
    let op = bundle.a_operator();
    (0..bundle.dim()).map(|k| op.matrix(k, bundle.dim())).collect()
}

/// Draw `p ~ N(0, G(θ))`.
pub fn draw_momentum<R: Rng + ?Sized>(bundle: &MetricBundle, rng: &mut R) -> MomentumVector {
    bundle.sample(rng)
}

/// Cached evaluation of the target at one point.
///
/// Samplers carry the evaluation of the current state between iterations so
/// that it is computed once per accepted move.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub theta: ParameterVector,
    pub log_density: f64,
    pub grad: Option<DVector<f64>>,
    pub metric: Option<Arc<MetricBundle>>,
}

impl PointEval {
    pub fn value<M: TargetModel + ?Sized>(model: &M, theta: ParameterVector) -> Result<Self, EvalError> {
        check_dim(model, &theta)?;
        let log_density = model.log_density(&theta)?;
        if !log_density.is_finite() {
            return Err(EvalError::non_finite("log density", &theta));
        }
        Ok(Self {
            theta,
            log_density,
            grad: None,
            metric: None,
        })
    }

    pub fn with_grad<M: TargetModel + ?Sized>(model: &M, theta: ParameterVector) -> Result<Self, EvalError> {
        check_dim(model, &theta)?;
        let (log_density, grad) = model.log_density_and_grad(&theta)?;
        if !log_density.is_finite() {
            return Err(EvalError::non_finite("log density", &theta));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(EvalError::non_finite("gradient", &theta));
        }
        Ok(Self {
            theta,
            log_density,
            grad: Some(grad),
            metric: None,
        })
    }

    /// Log density, gradient and metric. For constant-metric models a
    /// previously computed bundle can be passed in and is shared.
    pub fn with_metric<M: TargetModel + ?Sized>(
        model: &M,
        theta: ParameterVector,
        reuse: Option<&Arc<MetricBundle>>,
    ) -> Result<Self, EvalError> {
        let mut point = Self::with_grad(model, theta)?;
        let bundle = match reuse {
            Some(b) if model.constant_metric() => Arc::clone(b),
            _ => Arc::new(model.metric(&point.theta)?),
        };
        point.metric = Some(bundle);
        Ok(point)
    }

    pub fn grad(&self) -> &DVector<f64> {
        self.grad.as_ref().expect("point evaluated without gradient")
    }

    pub fn bundle(&self) -> &Arc<MetricBundle> {
        self.metric.as_ref().expect("point evaluated without metric")
    }

    pub fn potential(&self) -> f64 {
        potential(self.log_density, self.bundle())
    }

    pub fn grad_phi(&self) -> DVector<f64> {
        grad_phi_at(self.grad(), self.bundle())
    }

    pub fn hamiltonian(&self, p: &MomentumVector) -> f64 {
        hamiltonian_at(self.log_density, self.bundle(), p)
    }
}

/// A phase-space point together with its metric and energy.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub theta: ParameterVector,
    pub p: MomentumVector,
    pub bundle: Arc<MetricBundle>,
    pub energy: f64,
}

impl PhaseState {
    pub fn new(point: &PointEval, p: MomentumVector) -> Self {
        let energy = point.hamiltonian(&p);
        Self {
            theta: point.theta.clone(),
            p,
            bundle: Arc::clone(point.bundle()),
            energy,
        }
    }
}

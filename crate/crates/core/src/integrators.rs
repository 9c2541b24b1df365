//! Leapfrog and the semi-explicit integrators for the manifold Hamiltonian.
//!
//! The manifold integrators split each step into a potential kick, a
//! momentum flow under the quadratic force `pᵀAᵏp` (solved coordinate by
//! coordinate with [`g_scalar`]), and a position update with a
//! position-dependent inverse metric.

use std::sync::Arc;

use crate::error::EvalError;
use crate::metric::{AOperator, MetricBundle};
use crate::model::{check_dim, MomentumVector, ParameterVector, PointEval, TargetModel};

/// Default bound on `|H|` before a trajectory is abandoned.
pub const DEFAULT_ENERGY_LIMIT: f64 = 1e6;

/// Denominators of the momentum flow closer to zero than this are poles.
pub const POLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    Leapfrog,
    #[default]
    Scheme1,
    Scheme2,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "leapfrog" => Ok(Scheme::Leapfrog),
            "scheme1" | "1" => Ok(Scheme::Scheme1),
            "scheme2" | "2" => Ok(Scheme::Scheme2),
            other => Err(format!("unknown integrator scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub epsilon: f64,
    /// Steps per proposal.
    pub n1: usize,
    /// Iterations of the implicit position update.
    pub n2: usize,
    pub scheme: Scheme,
    /// Trajectories with `|H|` above this (or non-finite) are abandoned.
    pub energy_limit: f64,
}

impl IntegratorConfig {
    pub fn new(epsilon: f64, n1: usize, n2: usize, scheme: Scheme) -> Self {
        Self {
            epsilon,
            n1,
            n2,
            scheme,
            energy_limit: DEFAULT_ENERGY_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        // ε = 0 is allowed: the trajectory is the identity, which freezes a
        // block in a Gibbs sweep.
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(format!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err("n1 and n2 must be at least 1".into());
        }
        if !(self.energy_limit > 0.0) {
            return Err("energy_limit must be positive".into());
        }
        Ok(())
    }
}

/// One leapfrog step for `H = −L(θ) + ½ pᵀM⁻¹p`.
pub fn leapfrog_step<M: TargetModel + ?Sized>(
    theta: &ParameterVector,
    p: &MomentumVector,
    epsilon: f64,
    mass: &MetricBundle,
    model: &M,
) -> Result<(ParameterVector, MomentumVector), EvalError> {
    let start = PointEval::with_grad(model, theta.clone())?;
    let (end, p) = leapfrog_from(&start, p, epsilon, mass, model)?;
    Ok((end.theta, p))
}

fn leapfrog_from<M: TargetModel + ?Sized>(
    start: &PointEval,
    p: &MomentumVector,
    epsilon: f64,
    mass: &MetricBundle,
    model: &M,
) -> Result<(PointEval, MomentumVector), EvalError> {
    let half = 0.5 * epsilon;
    let p_half = p + start.grad() * half;
    let theta = &start.theta + mass.solve(&p_half) * epsilon;
    let end = PointEval::with_grad(model, theta)?;
    let p_new = p_half + end.grad() * half;
    Ok((end, p_new))
}

/// `N₁` leapfrog steps from an evaluated point, with the energy guard applied
/// to the separable Hamiltonian after each step.
pub fn leapfrog_trajectory<M: TargetModel + ?Sized>(
    model: &M,
    start: &PointEval,
    p0: &MomentumVector,
    config: &IntegratorConfig,
    mass: &MetricBundle,
) -> Result<(PointEval, MomentumVector), EvalError> {
    let mut point = start.clone();
    let mut p = p0.clone();
    for _ in 0..config.n1 {
        let (next, q) = leapfrog_from(&point, &p, config.epsilon, mass, model)?;
        point = next;
        p = q;
        let h = -point.log_density + 0.5 * mass.inverse_quadratic(&p);
        guard(h, config.energy_limit)?;
    }
    Ok((point, p))
}

fn guard(h: f64, limit: f64) -> Result<(), EvalError> {
    if !h.is_finite() || h.abs() > limit {
        return Err(EvalError::Divergence { energy: h });
    }
    Ok(())
}

/// Exact-in-pieces flow of `dp/dτ = αp² + βp + γ` over a step `ε`, as the
/// symmetric composition drift(γ, ε/2) ∘ quad(α, ε/2) ∘ lin(β, ε) ∘
/// quad(α, ε/2) ∘ drift(γ, ε/2).
pub fn g_scalar(p0: f64, epsilon: f64, alpha: f64, beta: f64, gamma: f64) -> Result<f64, EvalError> {
    let p1 = p0 + 0.5 * epsilon * gamma;
    let p2 = mobius(p1, epsilon, alpha)?;
    let p3 = (epsilon * beta).exp() * p2;
    let p4 = mobius(p3, epsilon, alpha)?;
    Ok(p4 + 0.5 * epsilon * gamma)
}

// Flow of dp/dτ = αp² over ε/2.
fn mobius(p: f64, epsilon: f64, alpha: f64) -> Result<f64, EvalError> {
    if alpha == 0.0 {
        return Ok(p);
    }
    let denominator = 1.0 - 0.5 * epsilon * alpha * p;
    if denominator.abs() < POLE_TOLERANCE {
        return Err(EvalError::Pole {
            coordinate: 0,
            denominator,
        });
    }
    Ok(p / denominator)
}

/// Momentum flow under `dpₖ/dτ = pᵀAᵏp` for a step `ε`, by a symmetric
/// coordinate sweep: coordinates 1..D−1 over ε/2, coordinate D over ε, then
/// D−1..1 over ε/2.
pub fn g_vector(p: &MomentumVector, epsilon: f64, bundle: &MetricBundle) -> Result<MomentumVector, EvalError> {
    let op = bundle.a_operator();
    g_vector_with(p, epsilon, &op)
}

pub fn g_vector_with(p: &MomentumVector, epsilon: f64, op: &AOperator<'_>) -> Result<MomentumVector, EvalError> {
    let mut p = p.clone();
    if op.is_zero() {
        return Ok(p);
    }
    let d = p.len();
    let update = |k: usize, eps: f64, p: &mut MomentumVector| -> Result<(), EvalError> {
        let (a, b, c) = op.coefficients(k, p);
        p[k] = g_scalar(p[k], eps, a, b, c).map_err(|e| match e {
            EvalError::Pole { denominator, .. } => EvalError::Pole {
                coordinate: k,
                denominator,
            },
            other => other,
        })?;
        Ok(())
    };
    for k in 0..d - 1 {
        update(k, 0.5 * epsilon, &mut p)?;
    }
    update(d - 1, epsilon, &mut p)?;
    for k in (0..d - 1).rev() {
        update(k, 0.5 * epsilon, &mut p)?;
    }
    Ok(p)
}

/// Position update `θ = θ₀ + ε G⁻¹(θ₀) p`, refined for `n2 > 1` by
/// iterations on the residual `½(G(θ) + G(θ₀))(θ − θ₀) − εp`.
pub fn newton_position_update<M: TargetModel + ?Sized>(
    theta0: &ParameterVector,
    p: &MomentumVector,
    epsilon: f64,
    model: &M,
    n2: usize,
) -> Result<ParameterVector, EvalError> {
    check_dim(model, theta0)?;
    let bundle = model.metric(theta0)?;
    newton_from(theta0, &bundle, p, epsilon, model, n2)
}

fn newton_from<M: TargetModel + ?Sized>(
    theta0: &ParameterVector,
    bundle0: &MetricBundle,
    p: &MomentumVector,
    epsilon: f64,
    model: &M,
    n2: usize,
) -> Result<ParameterVector, EvalError> {
    let mut theta = theta0 + bundle0.solve(p) * epsilon;
    if bundle0.is_constant() {
        return Ok(theta);
    }
    let target = p * epsilon;
    for _ in 1..n2 {
        let bundle = model.metric(&theta)?;
        let delta = &theta - theta0;
        let residual = (bundle.mul(&delta) + bundle0.mul(&delta)) * 0.5 - &target;
        theta -= bundle.solve(&residual);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::non_finite("position update", &theta));
        }
    }
    Ok(theta)
}

/// One step of Scheme 1 from an evaluated point (gradient and metric).
///
/// Returns the evaluated end point so the next step can reuse it.
pub fn scheme1_from<M: TargetModel + ?Sized>(
    model: &M,
    start: &PointEval,
    p0: &MomentumVector,
    epsilon: f64,
    n2: usize,
) -> Result<(PointEval, MomentumVector), EvalError> {
    let half = 0.5 * epsilon;
    let bundle0 = start.bundle();
    let p1 = p0 - start.grad_phi() * half;
    let p2 = g_vector(&p1, half, bundle0)?;
    let theta = newton_from(&start.theta, bundle0, &p2, epsilon, model, n2)?;
    let end = PointEval::with_metric(model, theta, Some(bundle0))?;
    let p3 = g_vector(&p2, half, end.bundle())?;
    let p = p3 - end.grad_phi() * half;
    Ok((end, p))
}

/// One step of Scheme 2: kick, half position update, full momentum flow,
/// half position update, kick.
pub fn scheme2_from<M: TargetModel + ?Sized>(
    model: &M,
    start: &PointEval,
    p0: &MomentumVector,
    epsilon: f64,
    n2: usize,
) -> Result<(PointEval, MomentumVector), EvalError> {
    let half = 0.5 * epsilon;
    let bundle0 = start.bundle();
    let p1 = p0 - start.grad_phi() * half;
    let theta1 = newton_from(&start.theta, bundle0, &p1, half, model, n2)?;
    let bundle1 = if bundle0.is_constant() && model.constant_metric() {
        Arc::clone(bundle0)
    } else {
        Arc::new(model.metric(&theta1)?)
    };
    let p2 = g_vector(&p1, epsilon, &bundle1)?;
    let theta = newton_from(&theta1, &bundle1, &p2, half, model, n2)?;
    let end = PointEval::with_metric(model, theta, Some(&bundle1))?;
    let p = p2 - end.grad_phi() * half;
    Ok((end, p))
}

/// One Scheme 1 step from a bare `(θ, p)`.
pub fn scheme1_step<M: TargetModel + ?Sized>(
    theta: &ParameterVector,
    p: &MomentumVector,
    epsilon: f64,
    n2: usize,
    model: &M,
) -> Result<(ParameterVector, MomentumVector), EvalError> {
    let start = PointEval::with_metric(model, theta.clone(), None)?;
    let (end, p) = scheme1_from(model, &start, p, epsilon, n2)?;
    Ok((end.theta, p))
}

/// One Scheme 2 step from a bare `(θ, p)`.
pub fn scheme2_step<M: TargetModel + ?Sized>(
    theta: &ParameterVector,
    p: &MomentumVector,
    epsilon: f64,
    n2: usize,
    model: &M,
) -> Result<(ParameterVector, MomentumVector), EvalError> {
    let start = PointEval::with_metric(model, theta.clone(), None)?;
    let (end, p) = scheme2_from(model, &start, p, epsilon, n2)?;
    Ok((end.theta, p))
}

/// `N₁` steps of the configured manifold scheme with the energy guard.
///
/// `Scheme::Leapfrog` is accepted only for constant metrics, where every
/// scheme reduces to it.
pub fn manifold_trajectory<M: TargetModel + ?Sized>(
    model: &M,
    start: &PointEval,
    p0: &MomentumVector,
    config: &IntegratorConfig,
) -> Result<(PointEval, MomentumVector), EvalError> {
    let mut point = start.clone();
    let mut p = p0.clone();
    for _ in 0..config.n1 {
        let (next, q) = match config.scheme {
            Scheme::Scheme1 => scheme1_from(model, &point, &p, config.epsilon, config.n2)?,
            Scheme::Scheme2 => scheme2_from(model, &point, &p, config.epsilon, config.n2)?,
            Scheme::Leapfrog => {
                if !point.bundle().is_constant() {
                    return Err(EvalError::Unsupported(
                        "leapfrog integration of a position-dependent metric",
                    ));
                }
                let bundle = Arc::clone(point.bundle());
                let (mut end, q) = leapfrog_from(&point, &p, config.epsilon, &bundle, model)?;
                end.metric = Some(bundle);
                (end, q)
            }
        };
        point = next;
        p = q;
        guard(point.hamiltonian(&p), config.energy_limit)?;
    }
    Ok((point, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use approx::assert_relative_eq;

    #[test]
    fn g_scalar_special_cases() {
        assert_eq!(g_scalar(0.7, 0.3, 0.0, 0.0, 0.0).unwrap(), 0.7);
        assert_eq!(g_scalar(0.0, 1.0, 0.0, 0.0, 2.0).unwrap(), 2.0);
        assert_relative_eq!(g_scalar(1.0, 1.0, 0.1, 0.0, 0.0).unwrap(), 1.0 / 0.9, epsilon = 1e-14);
    }

    #[test]
    fn g_scalar_reports_pole() {
        // 1 − ε α p / 2 = 0 with ε = 1, α = 2, p = 1.
        assert!(matches!(g_scalar(1.0, 1.0, 2.0, 0.0, 0.0), Err(EvalError::Pole { .. })));
    }

    #[test]
    fn leapfrog_hand_example() {
        struct Normal;
        impl TargetModel for Normal {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, t: &ParameterVector) -> Result<f64, EvalError> {
                Ok(-0.5 * t[0] * t[0])
            }
            fn grad_log_density(&self, t: &ParameterVector) -> Result<DVector<f64>, EvalError> {
                Ok(-t)
            }
        }
        let mass = MetricBundle::identity(1);
        let (t, p) = leapfrog_step(
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 0.0),
            0.1,
            &mass,
            &Normal,
        )
        .unwrap();
        assert_relative_eq!(t[0], 0.995, epsilon = 1e-14);
        assert_relative_eq!(p[0], -0.09975, epsilon = 1e-14);
    }
}

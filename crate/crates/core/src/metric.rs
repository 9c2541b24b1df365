//! Position-specific metric tensors and their derivatives.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::EvalError;
use crate::linalg::{symmetrize, trace_of_product, SpdFactor, SpdMatrix};

/// Partial derivatives `∂G/∂θₖ` of a metric tensor.
#[derive(Debug, Clone)]
pub enum MetricDerivs {
    /// The metric does not depend on position.
    Zero,
    /// One dense symmetric matrix per coordinate.
    Dense(Vec<DMatrix<f64>>),
    /// `∂G/∂θₖ = dₖ eₖ eₖᵀ`: a single non-zero diagonal entry per coordinate.
    DiagonalEntries(Vec<f64>),
}

impl MetricDerivs {
    pub fn is_zero(&self) -> bool {
        match self {
            MetricDerivs::Zero => true,
            MetricDerivs::Dense(_) | MetricDerivs::DiagonalEntries(_) => false,
        }
    }

    /// Materialize `∂G/∂θₖ` as a dense matrix.
    pub fn dense(&self, k: usize, dim: usize) -> DMatrix<f64> {
        match self {
            MetricDerivs::Zero => DMatrix::zeros(dim, dim),
            MetricDerivs::Dense(m) => m[k].clone(),
            MetricDerivs::DiagonalEntries(d) => {
                let mut m = DMatrix::zeros(dim, dim);
                m[(k, k)] = d[k];
                m
            }
        }
    }
}

/// Metric tensor `G(θ)` together with its factorization, log-determinant
/// and partial derivatives.
#[derive(Debug)]
pub struct MetricBundle {
    matrix: SpdMatrix,
    factor: SpdFactor,
    logdet: f64,
    derivs: MetricDerivs,
    inverse: OnceLock<DMatrix<f64>>,
}

impl Clone for MetricBundle {
    fn clone(&self) -> Self {
        let inverse = OnceLock::new();
        if let Some(inv) = self.inverse.get() {
            let _ = inverse.set(inv.clone());
        }
        Self {
            matrix: self.matrix.clone(),
            factor: self.factor.clone(),
            logdet: self.logdet,
            derivs: self.derivs.clone(),
            inverse,
        }
    }
}

impl MetricBundle {
    pub fn new(matrix: SpdMatrix, derivs: MetricDerivs) -> Result<Self, EvalError> {
        let factor = matrix.factor()?;
        let logdet = factor.logdet();
        if !logdet.is_finite() {
            return Err(EvalError::Factorization(matrix.dim()));
        }
        if let MetricDerivs::Dense(d) = &derivs {
            debug_assert_eq!(d.len(), matrix.dim());
        }
        Ok(Self {
            matrix,
            factor,
            logdet,
            derivs,
            inverse: OnceLock::new(),
        })
    }

    pub fn dense(g: DMatrix<f64>, derivs: MetricDerivs) -> Result<Self, EvalError> {
        Self::new(SpdMatrix::Dense(g), derivs)
    }

    /// Position-independent metric.
    pub fn constant(g: DMatrix<f64>) -> Result<Self, EvalError> {
        Self::new(SpdMatrix::Dense(g), MetricDerivs::Zero)
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SpdMatrix {
        &self.matrix
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn derivs(&self) -> &MetricDerivs {
        &self.derivs
    }

    pub fn is_constant(&self) -> bool {
        self.derivs.is_zero()
    }

    /// `G v`.
    pub fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.matrix.mul(v)
    }

    /// `G⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// `pᵀ G⁻¹ p`.
    pub fn inverse_quadratic(&self, p: &DVector<f64>) -> f64 {
        p.dot(&self.solve(p))
    }

    /// Dense `G⁻¹`, computed on first use.
    pub fn inverse(&self) -> &DMatrix<f64> {
        self.inverse.get_or_init(|| self.factor.inverse())
    }

    /// Draw `p ~ N(0, G)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.factor.lower_mul(&z)
    }

    /// `Tr[G⁻¹ ∂G/∂θₖ]` for every k.
    pub fn trace_terms(&self) -> DVector<f64> {
        let d = self.dim();
        match &self.derivs {
            MetricDerivs::Zero => DVector::zeros(d),
            MetricDerivs::Dense(dg) => {
                let inv = self.inverse();
                DVector::from_fn(d, |k, _| trace_of_product(inv, &dg[k]))
            }
            MetricDerivs::DiagonalEntries(e) => {
                let inv = self.inverse();
                DVector::from_fn(d, |k, _| e[k] * inv[(k, k)])
            }
        }
    }

    /// The matrices `Aᵏ = ½ G⁻¹ (∂G/∂θₖ) G⁻¹ = −½ ∂G⁻¹/∂θₖ`, in a form
    /// suited to the momentum sweep.
    pub fn a_operator(&self) -> AOperator<'_> {
        match &self.derivs {
            MetricDerivs::Zero => AOperator::Zero,
            MetricDerivs::Dense(dg) => {
                let inv = self.inverse();
                let mats = dg
                    .iter()
                    .map(|d| {
                        let mut a = inv * d * inv * 0.5;
                        symmetrize(&mut a);
                        a
                    })
                    .collect();
                AOperator::Dense(mats)
            }
            MetricDerivs::DiagonalEntries(e) => AOperator::RankOne {
                half_scale: e.iter().map(|v| 0.5 * v).collect(),
                inverse: self.inverse(),
            },
        }
    }
}

/// Quadratic momentum forces `pᵀ Aᵏ p`, split per coordinate as
/// `αₖ pₖ² + βₖ pₖ + γₖ` for the sequential momentum sweep.
pub enum AOperator<'a> {
    Zero,
    Dense(Vec<DMatrix<f64>>),
    /// `Aᵏ = sₖ cₖ cₖᵀ` where `cₖ` is column k of `G⁻¹`.
    RankOne { half_scale: Vec<f64>, inverse: &'a DMatrix<f64> },
}

impl AOperator<'_> {
    pub fn is_zero(&self) -> bool {
        matches!(self, AOperator::Zero)
    }

    /// `(αₖ, βₖ, γₖ)` for the current momentum.
    pub fn coefficients(&self, k: usize, p: &DVector<f64>) -> (f64, f64, f64) {
        match self {
            AOperator::Zero => (0.0, 0.0, 0.0),
            AOperator::Dense(mats) => {
                let a = &mats[k];
                let akk = a[(k, k)];
                let pk = p[k];
                let mut cross = 0.0;
                let mut full = 0.0;
                for i in 0..a.nrows() {
                    let row: f64 = a.row(i).iter().zip(p.iter()).map(|(x, y)| x * y).sum();
                    full += p[i] * row;
                    if i == k {
                        cross = row - akk * pk;
                    }
                }
                let alpha = akk;
                let beta = 2.0 * cross;
                let gamma = full - akk * pk * pk - 2.0 * pk * cross;
                (alpha, beta, gamma)
            }
            AOperator::RankOne { half_scale, inverse } => {
                let col = inverse.column(k);
                let ckk = col[k];
                let dot: f64 = col.iter().zip(p.iter()).map(|(c, q)| c * q).sum();
                let rest = dot - ckk * p[k];
                let s = half_scale[k];
                (s * ckk * ckk, 2.0 * s * ckk * rest, s * rest * rest)
            }
        }
    }

    /// Dense `Aᵏ`.
    pub fn matrix(&self, k: usize, dim: usize) -> DMatrix<f64> {
        match self {
            AOperator::Zero => DMatrix::zeros(dim, dim),
            AOperator::Dense(m) => m[k].clone(),
            AOperator::RankOne { half_scale, inverse } => {
                let c = inverse.column(k).into_owned();
                &c * c.transpose() * half_scale[k]
            }
        }
    }
}

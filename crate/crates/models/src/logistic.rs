//! Bayesian logistic regression with a Gaussian prior `β ~ N(0, αI)`.
//!
//! The metric is the expected Fisher information plus the prior precision,
//! `G(β) = XᵀΛX + I/α` with `Λ = diag(σₙ(1 − σₙ))`.

use std::path::Path;

use geomc_core::{EvalError, MetricBundle, MetricDerivs, ParameterVector, TargetModel};
use nalgebra::{DMatrix, DVector};

use crate::error::DataError;

/// Covariates and binary responses as read from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    /// `N × p` raw covariates.
    pub covariates: DMatrix<f64>,
    pub response: Vec<f64>,
}

impl Dataset {
    /// CSV with a header row; the last column is the 0/1 response.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::csv(path, e))?;
        let header = reader.headers().map_err(|e| DataError::csv(path, e))?.clone();
        if header.len() < 2 {
            return Err(DataError::Invalid(format!(
                "{}: need at least one covariate and a response column",
                path.display()
            )));
        }
        let p = header.len() - 1;
        let mut values = Vec::new();
        let mut response = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DataError::csv(path, e))?;
            if record.len() != header.len() {
                return Err(DataError::Invalid(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    row + 2,
                    record.len(),
                    header.len()
                )));
            }
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    DataError::Invalid(format!(
                        "{}: row {}, column `{}`: `{field}` is not a number",
                        path.display(),
                        row + 2,
                        &header[col]
                    ))
                })?;
                if col < p {
                    values.push(v);
                } else if v == 0.0 || v == 1.0 {
                    response.push(v);
                } else {
                    return Err(DataError::Invalid(format!(
                        "{}: row {}: response must be 0 or 1, got {v}",
                        path.display(),
                        row + 2
                    )));
                }
            }
        }
        let n = response.len();
        Ok(Self {
            names: header.iter().take(p).map(str::to_owned).collect(),
            covariates: DMatrix::from_row_slice(n, p, &values),
            response,
        })
    }
}

/// How raw covariates become design-matrix columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Expansion {
    #[default]
    Linear,
    /// Each covariate `x` contributes `x, x², x³`.
    Cubic,
}

impl std::str::FromStr for Expansion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Expansion::Linear),
            "cubic" => Ok(Expansion::Cubic),
            other => Err(format!("unknown expansion `{other}` (expected linear or cubic)")),
        }
    }
}

/// Location and scale used to z-score one raw covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnScaling {
    pub mean: f64,
    pub sd: f64,
}

/// Standardize each raw covariate, expand, and prepend an intercept column.
///
/// Powers are taken of the standardized covariate and not rescaled again:
/// z-scoring `x³` separately makes it nearly collinear with `x` and leaves
/// the posterior badly conditioned.
pub fn design_matrix(data: &Dataset, expansion: Expansion) -> (DMatrix<f64>, Vec<ColumnScaling>) {
    let raw = &data.covariates;
    let (n, p) = raw.shape();
    let mut scaling = Vec::with_capacity(p);
    let mut z = Vec::with_capacity(p);
    for j in 0..p {
        let c = raw.column(j).into_owned();
        let mean = c.mean();
        let var = if n > 1 {
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            0.0
        };
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        z.push(c.map(|v| (v - mean) / sd));
        scaling.push(ColumnScaling { mean, sd });
    }
    let powers = match expansion {
        Expansion::Linear => 1,
        Expansion::Cubic => 3,
    };
    // All linear terms first, then squares, then cubes.
    let mut x = DMatrix::from_element(n, p * powers + 1, 1.0);
    for power in 0..powers {
        for (j, c) in z.iter().enumerate() {
            x.set_column(1 + power * p + j, &c.map(|v| v.powi(power as i32 + 1)));
        }
    }
    (x, scaling)
}

/// `log(1 + eᶻ)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    x: DMatrix<f64>,
    t: DVector<f64>,
    alpha: f64,
    scaling: Vec<ColumnScaling>,
}

impl LogisticModel {
    /// `x` is the full `N × D` design matrix; `alpha` may be infinite to
    /// drop the prior.
    pub fn new(x: DMatrix<f64>, t: Vec<f64>, alpha: f64) -> Result<Self, DataError> {
        if x.nrows() != t.len() {
            return Err(DataError::Invalid(format!(
                "design has {} rows but there are {} responses",
                x.nrows(),
                t.len()
            )));
        }
        if !(alpha > 0.0) {
            return Err(DataError::Invalid(format!("prior variance must be positive, got {alpha}")));
        }
        if t.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(DataError::Invalid("responses must be 0 or 1".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("design matrix has non-finite entries".into()));
        }
        Ok(Self {
            x,
            t: DVector::from_vec(t),
            alpha,
            scaling: Vec::new(),
        })
    }

    pub fn from_dataset(data: &Dataset, expansion: Expansion, alpha: f64) -> Result<Self, DataError> {
        let (x, scaling) = design_matrix(data, expansion);
        let mut model = Self::new(x, data.response.clone(), alpha)?;
        model.scaling = scaling;
        Ok(model)
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Standardization applied to each raw covariate.
    pub fn scaling(&self) -> &[ColumnScaling] {
        &self.scaling
    }

    fn linear_predictor(&self, beta: &ParameterVector) -> DVector<f64> {
        &self.x * beta
    }

    pub fn log_joint(&self, beta: &ParameterVector) -> f64 {
        let z = self.linear_predictor(beta);
        let fit: f64 = z.dot(&self.t) - z.iter().map(|v| softplus(*v)).sum::<f64>();
        fit - beta.norm_squared() / (2.0 * self.alpha)
    }

    pub fn grad(&self, beta: &ParameterVector) -> DVector<f64> {
        let s = self.linear_predictor(beta).map(sigmoid);
        self.x.tr_mul(&(&self.t - s)) - beta / self.alpha
    }

    /// `XᵀΛX + I/α`.
    pub fn metric_matrix(&self, beta: &ParameterVector) -> DMatrix<f64> {
        let s = self.linear_predictor(beta).map(sigmoid);
        let lambda = s.map(|v| v * (1.0 - v));
        let mut g = weighted_gram(&self.x, &lambda);
        for i in 0..g.nrows() {
            g[(i, i)] += 1.0 / self.alpha;
        }
        g
    }

    /// `∂G/∂βᵢ = Xᵀ Λ Vⁱ X` with `Vⁱ = diag((1 − 2σₙ) Xₙᵢ)`.
    pub fn metric_derivs(&self, beta: &ParameterVector) -> Vec<DMatrix<f64>> {
        let s = self.linear_predictor(beta).map(sigmoid);
        let w = s.map(|v| v * (1.0 - v) * (1.0 - 2.0 * v));
        (0..self.x.ncols())
            .map(|i| weighted_gram(&self.x, &w.component_mul(&self.x.column(i))))
            .collect()
    }
}

/// `Xᵀ diag(w) X`.
fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (mut row, wi) in scaled.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let mut g = x.tr_mul(&scaled);
    geomc_core::linalg::symmetrize(&mut g);
    g
}

impl TargetModel for LogisticModel {
    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn log_density(&self, theta: &ParameterVector) -> Result<f64, EvalError> {
        Ok(self.log_joint(theta))
    }

    fn grad_log_density(&self, theta: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(self.grad(theta))
    }

    fn log_density_and_grad(&self, theta: &ParameterVector) -> Result<(f64, DVector<f64>), EvalError> {
        let z = self.linear_predictor(theta);
        let fit: f64 = z.dot(&self.t) - z.iter().map(|v| softplus(*v)).sum::<f64>();
        let l = fit - theta.norm_squared() / (2.0 * self.alpha);
        let s = z.map(sigmoid);
        let g = self.x.tr_mul(&(&self.t - s)) - theta / self.alpha;
        Ok((l, g))
    }

    fn metric(&self, theta: &ParameterVector) -> Result<MetricBundle, EvalError> {
        MetricBundle::dense(self.metric_matrix(theta), MetricDerivs::Dense(self.metric_derivs(theta)))
    }

    fn has_metric(&self) -> bool {
        true
    }
}

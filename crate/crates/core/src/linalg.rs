//! Symmetric positive-definite storage and factorizations.
//!
//! Metrics come in two shapes: dense (logistic regression, Cox process,
//! GP blocks) and symmetric tridiagonal (the AR(1) latent block of the
//! stochastic volatility model). Both factor as `G = L Lᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::EvalError;

/// A symmetric positive-definite matrix in one of the supported layouts.
#[derive(Debug, Clone)]
pub enum SpdMatrix {
    Dense(DMatrix<f64>),
    /// `diag` has length n, `off` has length n - 1 (sub- and super-diagonal).
    Tridiagonal { diag: Vec<f64>, off: Vec<f64> },
}

impl SpdMatrix {
    pub fn dim(&self) -> usize {
        match self {
            SpdMatrix::Dense(m) => m.nrows(),
            SpdMatrix::Tridiagonal { diag, .. } => diag.len(),
        }
    }

    /// `G v`.
    pub fn mul(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdMatrix::Dense(m) => m * v,
            SpdMatrix::Tridiagonal { diag, off } => {
                let n = diag.len();
                let mut out = DVector::zeros(n);
                for i in 0..n {
                    let mut acc = diag[i] * v[i];
                    if i > 0 {
                        acc += off[i - 1] * v[i - 1];
                    }
                    if i + 1 < n {
                        acc += off[i] * v[i + 1];
                    }
                    out[i] = acc;
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SpdMatrix::Dense(m) => m.clone(),
            SpdMatrix::Tridiagonal { diag, off } => {
                let n = diag.len();
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    m[(i, i)] = diag[i];
                    if i + 1 < n {
                        m[(i, i + 1)] = off[i];
                        m[(i + 1, i)] = off[i];
                    }
                }
                m
            }
        }
    }

    pub fn factor(&self) -> Result<SpdFactor, EvalError> {
        match self {
            SpdMatrix::Dense(m) => {
                let chol = Cholesky::new(m.clone()).ok_or(EvalError::Factorization(m.nrows()))?;
                // nalgebra accepts tiny or negative-rounded pivots as long as they
                // are not exactly zero; reject anything that is not a usable factor.
                if chol.l_dirty().diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                    return Err(EvalError::Factorization(m.nrows()));
                }
                Ok(SpdFactor::Dense(chol))
            }
            SpdMatrix::Tridiagonal { diag, off } => {
                TridiagonalCholesky::new(diag, off).map(SpdFactor::Tridiagonal)
            }
        }
    }
}

/// Lower bidiagonal Cholesky factor of a symmetric tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TridiagonalCholesky {
    l_diag: Vec<f64>,
    l_off: Vec<f64>,
}

impl TridiagonalCholesky {
    pub fn new(diag: &[f64], off: &[f64]) -> Result<Self, EvalError> {
        let n = diag.len();
        assert_eq!(off.len(), n.saturating_sub(1), "tridiagonal off-diagonal length");
        let mut l_diag = Vec::with_capacity(n);
        let mut l_off = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut pivot = diag[i];
            if i > 0 {
                let l = off[i - 1] / l_diag[i - 1];
                l_off.push(l);
                pivot -= l * l;
            }
            if !(pivot.is_finite() && pivot > 0.0) {
                return Err(EvalError::Factorization(n));
            }
            l_diag.push(pivot.sqrt());
        }
        Ok(Self { l_diag, l_off })
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l_diag.len();
        let mut y = b.clone();
        for i in 0..n {
            if i > 0 {
                y[i] -= self.l_off[i - 1] * y[i - 1];
            }
            y[i] /= self.l_diag[i];
        }
        for i in (0..n).rev() {
            if i + 1 < n {
                y[i] -= self.l_off[i] * y[i + 1];
            }
            y[i] /= self.l_diag[i];
        }
        y
    }

    fn lower_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.l_diag.len();
        DVector::from_fn(n, |i, _| {
            let mut v = self.l_diag[i] * z[i];
            if i > 0 {
                v += self.l_off[i - 1] * z[i - 1];
            }
            v
        })
    }
}

/// Solve-capable factorization `G = L Lᵀ`.
#[derive(Debug, Clone)]
pub enum SpdFactor {
    Dense(Cholesky<f64, Dyn>),
    Tridiagonal(TridiagonalCholesky),
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        match self {
            SpdFactor::Dense(c) => c.l_dirty().nrows(),
            SpdFactor::Tridiagonal(t) => t.l_diag.len(),
        }
    }

    /// `G⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense(c) => c.solve(b),
            SpdFactor::Tridiagonal(t) => t.solve(b),
        }
    }

    /// `log |G|`.
    pub fn logdet(&self) -> f64 {
        let half: f64 = match self {
            SpdFactor::Dense(c) => c.l_dirty().diagonal().iter().map(|d| d.ln()).sum(),
            SpdFactor::Tridiagonal(t) => t.l_diag.iter().map(|d| d.ln()).sum(),
        };
        2.0 * half
    }

    /// `L z`; maps a standard normal draw to `N(0, G)`.
    pub fn lower_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense(c) => c.l() * z,
            SpdFactor::Tridiagonal(t) => t.lower_mul(z),
        }
    }

    /// Dense `G⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        match self {
            SpdFactor::Dense(c) => {
                let mut inv = c.inverse();
                symmetrize(&mut inv);
                inv
            }
            SpdFactor::Tridiagonal(t) => {
                let n = t.l_diag.len();
                let mut inv = DMatrix::zeros(n, n);
                for j in 0..n {
                    let mut e = DVector::zeros(n);
                    e[j] = 1.0;
                    inv.set_column(j, &t.solve(&e));
                }
                symmetrize(&mut inv);
                inv
            }
        }
    }
}

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `Tr(A B)` for square matrices without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

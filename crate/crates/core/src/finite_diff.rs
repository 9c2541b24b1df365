//! Central finite differences, used to check hand-coded derivatives.

use nalgebra::{DMatrix, DVector};

/// Central-difference gradient of a scalar function.
pub fn gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut up = x.clone();
        let mut down = x.clone();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

/// Central-difference Jacobian `J[i, j] = ∂fᵢ/∂xⱼ`.
pub fn jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut columns = Vec::with_capacity(n);
    for j in 0..n {
        let mut up = x.clone();
        let mut down = x.clone();
        up[j] += h;
        down[j] -= h;
        columns.push((f(&up) - f(&down)) / (2.0 * h));
    }
    DMatrix::from_columns(&columns)
}

/// Central-difference derivative of a matrix-valued function along `x[k]`.
pub fn matrix_derivative(
    f: impl Fn(&DVector<f64>) -> DMatrix<f64>,
    x: &DVector<f64>,
    k: usize,
    h: f64,
) -> DMatrix<f64> {
    let mut up = x.clone();
    let mut down = x.clone();
    up[k] += h;
    down[k] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

/// `‖a − b‖∞ / ‖b‖∞`, falling back to the absolute error when `b` is
/// essentially zero.
pub fn relative_error<'a, I>(a: I, b: I) -> f64
where
    I: IntoIterator<Item = &'a f64>,
{
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, y) in a.into_iter().zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

use approx::assert_relative_eq;
use geomc_core::finite_diff::{gradient, matrix_derivative, relative_error};
use geomc_core::integrators::g_vector_with;
use geomc_core::metric::AOperator;
use geomc_core::{MetricDerivs, TargetModel};
use geomc_models::lgcp::{covariance, generate, plateau_increase, LgcpModel, LgcpParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(n: usize, seed: u64) -> (LgcpModel, Vec<f64>) {
    let params = LgcpParams::standard(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate(&params, &mut rng).unwrap();
    (LgcpModel::new(params, &data.y).unwrap(), data.x_true)
}

#[test]
fn standard_constants() {
    let p = LgcpParams::standard(16);
    assert_relative_eq!(p.beta, 1.0 / 33.0);
    assert_relative_eq!(p.mu, 126f64.ln() - 1.91 / 2.0);
    assert_relative_eq!(p.cell_area(), 1.0 / 256.0);
}

#[test]
fn covariance_is_row_major_and_spd() {
    let p = LgcpParams::standard(4);
    let c = covariance(&p);
    // Cells (0,0) and (0,1) are neighbours at distance 1; (0,0) and (1,0)
    // sit a row apart, also distance 1.
    let k1 = p.sigma2 * (-1.0 / (4.0 * p.beta)).exp();
    assert_relative_eq!(c[(0, 1)], k1, epsilon = 1e-15);
    assert_relative_eq!(c[(0, 4)], k1, epsilon = 1e-15);
    assert_relative_eq!(c[(0, 5)], p.sigma2 * (-(2f64.sqrt()) / (4.0 * p.beta)).exp(), epsilon = 1e-15);
    assert!(c.clone().cholesky().is_some());
}

#[test]
fn degenerate_field_counts() {
    let mut params = LgcpParams::standard(4);
    params.sigma2 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = 2000;
    let mut total = 0u64;
    for _ in 0..reps {
        let d = generate(&params, &mut rng).unwrap();
        assert!(d.x_true.iter().all(|x| *x == params.mu));
        total += d.y.iter().sum::<u64>();
    }
    let rate = params.cell_area() * params.mu.exp();
    let mean = total as f64 / (reps * 16) as f64;
    let se = (rate / (reps * 16) as f64).sqrt();
    assert!((mean - rate).abs() < 3.0 * se, "mean count {mean}, expected {rate}");
}

#[test]
fn field_mean_matches_mu() {
    let params = LgcpParams::standard(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 1000;
    let mut sum = vec![0.0; 9];
    for _ in 0..draws {
        for (s, x) in sum.iter_mut().zip(generate(&params, &mut rng).unwrap().x_true) {
            *s += x;
        }
    }
    let se = (params.sigma2 / draws as f64).sqrt();
    for s in sum {
        assert!((s / draws as f64 - params.mu).abs() < 3.5 * se);
    }
}

#[test]
fn gradient_vanishes_at_prior_mean_when_counts_match() {
    // With y = e at x = μ1 both the Poisson score and the prior term are
    // zero. Integer counts force m·e^μ to be an integer, so pick μ that way.
    let params = LgcpParams {
        n: 3,
        beta: 0.5,
        sigma2: 1.0,
        mu: (4.0 * 9.0f64).ln(),
    };
    let model = LgcpModel::new(params, &[4; 9]).unwrap();
    let (_, g) = model.log_density_and_grad(&model.initial_point()).unwrap();
    assert!(g.abs().max() < 1e-12, "{g}");
}

#[test]
fn single_cell_score() {
    // One cell, y = 3, x chosen so m·eˣ = 2.
    let params = LgcpParams {
        n: 1,
        beta: 1.0,
        sigma2: 1.0,
        mu: 0.0,
    };
    let model = LgcpModel::new(params, &[3]).unwrap();
    let x = DVector::from_element(1, 2f64.ln());
    assert_relative_eq!(model.likelihood_grad(&x).unwrap()[0], 1.0, epsilon = 1e-14);
}

#[test]
fn gradient_matches_finite_differences() {
    let (model, x_true) = small_model(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = DVector::from_fn(64, |i, _| x_true[i] + rng.random_range(-0.5..0.5));
        let (_, g) = model.log_density_and_grad(&x).unwrap();
        let fd = gradient(|v| model.log_density(v).unwrap(), &x, 1e-6);
        let err = relative_error(g.iter(), fd.iter());
        assert!(err < 1e-5, "gradient error {err}");
    }
}

#[test]
fn metric_derivatives_match_finite_differences() {
    let (model, x_true) = small_model(4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dense = |x: &DVector<f64>| model.metric(x).unwrap().matrix().to_dense();
    for _ in 0..50 {
        let x = DVector::from_fn(16, |i, _| x_true[i] + rng.random_range(-1.0..1.0));
        let bundle = model.metric(&x).unwrap();
        let e = model.intensity(&x).unwrap();
        for k in 0..16 {
            let analytic = bundle.derivs().dense(k, 16);
            assert_eq!(analytic.iter().filter(|v| **v != 0.0).count(), 1);
            assert_eq!(analytic[(k, k)], e[k]);
            let fd = matrix_derivative(dense, &x, k, 1e-5);
            let err = relative_error(analytic.iter(), fd.iter());
            assert!(err < 1e-6, "derivative {k}: error {err}");
        }
    }
}

#[test]
fn metric_tends_to_prior_precision() {
    let (model, _) = small_model(4, 8);
    let x = DVector::from_element(16, -60.0);
    let g = model.metric(&x).unwrap().matrix().to_dense();
    assert!((g - model.precision()).abs().max() < 1e-20);
}

#[test]
fn rank_one_operator_matches_dense() {
    let (model, x_true) = small_model(4, 9);
    let x = DVector::from_column_slice(&x_true);
    let bundle = model.metric(&x).unwrap();
    assert!(matches!(bundle.derivs(), MetricDerivs::DiagonalEntries(_)));
    let dense_derivs: Vec<DMatrix<f64>> = (0..16).map(|k| bundle.derivs().dense(k, 16)).collect();
    let inv = bundle.inverse();
    let dense_op = AOperator::Dense(dense_derivs.iter().map(|d| 0.5 * inv * d * inv).collect());
    let fast = bundle.a_operator();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = DVector::from_fn(16, |_, _| rng.random_range(-2.0..2.0));
    for k in 0..16 {
        let (a1, b1, c1) = fast.coefficients(k, &p);
        let (a2, b2, c2) = dense_op.coefficients(k, &p);
        assert!((a1 - a2).abs() < 1e-10 && (b1 - b2).abs() < 1e-10 && (c1 - c2).abs() < 1e-10);
    }
    let p1 = g_vector_with(&p, 0.1, &fast).unwrap();
    let p2 = g_vector_with(&p, 0.1, &dense_op).unwrap();
    assert!((p1 - p2).abs().max() < 1e-10);
}

#[test]
fn overflow_is_an_error() {
    let (model, _) = small_model(2, 11);
    assert!(model.log_density(&DVector::from_element(4, 800.0)).is_err());
    assert!(LgcpModel::new(LgcpParams::standard(2), &[1, 2, 3]).is_err());
}

#[test]
fn plateau_statistic() {
    let flat = vec![-100.0; 50];
    assert_eq!(plateau_increase(&flat, 0.2), 0.0);
    let climbing: Vec<f64> = (0..100).map(|i| -1000.0 + 5.0 * i as f64).collect();
    assert!(plateau_increase(&climbing, 0.2) > 0.01);
}

use geomc_core::finite_diff::jacobian;
use geomc_core::integrators::{
    g_scalar, g_vector, leapfrog_step, manifold_trajectory, newton_position_update, scheme1_step, scheme2_step,
    IntegratorConfig, Scheme,
};
use geomc_core::metric::MetricDerivs;
use geomc_core::toy::{Gaussian, StandardNormal, VaryingMetricGaussian};
use geomc_core::{hamiltonian, EvalError, MetricBundle, ParameterVector, PointEval, TargetModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn correlated() -> Gaussian {
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.2, 0.6, 2.0, -0.3, 0.2, -0.3, 0.5]);
    Gaussian::from_covariance(v(&[0.5, -1.0, 0.0]), &cov).unwrap()
}

#[test]
fn leapfrog_zero_step_is_identity() {
    let m = StandardNormal { dim: 2 };
    let mass = MetricBundle::identity(2);
    let (t, p) = leapfrog_step(&v(&[0.3, -0.2]), &v(&[1.0, 2.0]), 0.0, &mass, &m).unwrap();
    assert_eq!(t, v(&[0.3, -0.2]));
    assert_eq!(p, v(&[1.0, 2.0]));
}

#[test]
fn leapfrog_is_reversible_and_volume_preserving() {
    let m = correlated();
    let mass = MetricBundle::constant(DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 1.5]))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let theta0 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let p0 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let (mut t, mut p) = (theta0.clone(), p0.clone());
        for _ in 0..25 {
            (t, p) = leapfrog_step(&t, &p, 0.1, &mass, &m).unwrap();
        }
        p = -p;
        for _ in 0..25 {
            (t, p) = leapfrog_step(&t, &p, 0.1, &mass, &m).unwrap();
        }
        assert!((t - &theta0).amax() < 1e-10);
        assert!((-p - &p0).amax() < 1e-10);

        let z0 = concat(&theta0, &p0);
        let jac = jacobian(
            |z| {
                let (t, p) = split(z);
                let (t, p) = leapfrog_step(&t, &p, 0.1, &mass, &m).unwrap();
                concat(&t, &p)
            },
            &z0,
            1e-5,
        );
        assert!((jac.determinant() - 1.0).abs() < 1e-6);
    }
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn split(z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let d = z.len() / 2;
    (z.rows(0, d).into_owned(), z.rows(d, d).into_owned())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn g_scalar_quadratic_flow_is_exact(p0 in -3.0f64..3.0, eps in 0.0f64..0.5, alpha in -2.0f64..2.0) {
        let den = 1.0 - eps * alpha * p0;
        prop_assume!(den.abs() > 0.05);
        let got = g_scalar(p0, eps, alpha, 0.0, 0.0).unwrap();
        let exact = p0 / den;
        prop_assert!((got - exact).abs() <= 1e-12 * exact.abs().max(1.0));
    }
}

#[test]
fn g_scalar_thousand_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 1000 {
        let p0: f64 = rng.random_range(-5.0..5.0);
        let ea: f64 = rng.random_range(-1.0..1.0);
        let den = 1.0 - ea * p0;
        if den.abs() < 0.05 {
            continue;
        }
        let got = g_scalar(p0, 1.0, ea, 0.0, 0.0).unwrap();
        assert!((got - p0 / den).abs() <= 1e-12 * (p0 / den).abs().max(1.0));
        checked += 1;
    }
}

#[test]
fn g_vector_trivial_cases() {
    let p = v(&[0.4, -1.1]);
    let flat = MetricBundle::identity(2);
    assert_eq!(g_vector(&p, 0.3, &flat).unwrap(), p);

    let g = MetricBundle::dense(
        DMatrix::from_element(1, 1, 2.0),
        MetricDerivs::Dense(vec![DMatrix::from_element(1, 1, 4.0)]),
    )
    .unwrap();
    let p1 = v(&[0.7]);
    let got = g_vector(&p1, 0.2, &g).unwrap()[0];
    assert_eq!(got, g_scalar(0.7, 0.2, 0.5, 0.0, 0.0).unwrap());
}

// Reference solution of dpₖ/dτ = pᵀAᵏp by classical RK4 with tiny steps.
fn rk4_momentum_flow(p: &DVector<f64>, eps: f64, a: &[DMatrix<f64>]) -> DVector<f64> {
    let f = |p: &DVector<f64>| DVector::from_fn(p.len(), |k, _| p.dot(&(&a[k] * p)));
    let steps = 2000;
    let h = eps / steps as f64;
    let mut y = p.clone();
    for _ in 0..steps {
        let k1 = f(&y);
        let k2 = f(&(&y + &k1 * (h / 2.0)));
        let k3 = f(&(&y + &k2 * (h / 2.0)));
        let k4 = f(&(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y
}

#[test]
fn g_vector_matches_ode_solution_to_third_order() {
    let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
    let d1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -0.5]);
    let d2 = DMatrix::from_row_slice(2, 2, &[0.2, -0.7, -0.7, 0.8]);
    let bundle = MetricBundle::dense(g, MetricDerivs::Dense(vec![d1, d2])).unwrap();
    let a = geomc_core::a_matrices(&bundle);
    let p = v(&[1.3, -0.9]);
    let err = |eps: f64| (g_vector(&p, eps, &bundle).unwrap() - rk4_momentum_flow(&p, eps, &a)).amax();
    let (e1, e2) = (err(0.1), err(0.05));
    assert!(e1 < 1e-2);
    // Local error O(ε³): halving ε cuts it by about 8.
    assert!(e1 / e2 > 6.0, "ratio {}", e1 / e2);
}

#[test]
fn newton_update_cases() {
    let m = correlated();
    let theta = v(&[0.1, 0.2, 0.3]);
    let p = v(&[1.0, -1.0, 0.5]);
    let g = m.metric(&theta).unwrap();
    let expected = &theta + g.solve(&p) * 0.1;
    for n2 in 1..4 {
        assert_eq!(newton_position_update(&theta, &p, 0.1, &m, n2).unwrap(), expected);
    }
    let vm = VaryingMetricGaussian { dim: 2 };
    let zero = DVector::zeros(2);
    assert_eq!(newton_position_update(&theta.rows(0, 2).into_owned(), &zero, 0.1, &vm, 3).unwrap(), theta.rows(0, 2));
}

/// One-dimensional target with `G(θ) = exp(2θ)`.
struct ExpMetric;

impl TargetModel for ExpMetric {
    fn dim(&self) -> usize {
        1
    }
    fn log_density(&self, t: &ParameterVector) -> Result<f64, EvalError> {
        Ok(-0.5 * t[0] * t[0])
    }
    fn grad_log_density(&self, t: &ParameterVector) -> Result<DVector<f64>, EvalError> {
        Ok(-t)
    }
    fn metric(&self, t: &ParameterVector) -> Result<MetricBundle, EvalError> {
        let g = (2.0 * t[0]).exp();
        MetricBundle::dense(
            DMatrix::from_element(1, 1, g),
            MetricDerivs::Dense(vec![DMatrix::from_element(1, 1, 2.0 * g)]),
        )
    }
    fn has_metric(&self) -> bool {
        true
    }
}

#[test]
fn newton_iterations_drive_residual_down() {
    let theta0 = v(&[0.4]);
    let p = v(&[1.5]);
    let eps = 0.01;
    let theta = newton_position_update(&theta0, &p, eps, &ExpMetric, 3).unwrap();
    let g = |t: f64| (2.0 * t).exp();
    let residual = 0.5 * (g(theta[0]) + g(theta0[0])) * (theta[0] - theta0[0]) - eps * p[0];
    assert!(residual.abs() < 1e-8, "residual {residual}");
}

#[test]
fn schemes_reduce_to_leapfrog_for_constant_metric() {
    let m = correlated();
    let mass = m.metric(&DVector::zeros(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let theta0 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let p0 = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let (mut tl, mut pl) = (theta0.clone(), p0.clone());
        let (mut t1, mut p1) = (theta0.clone(), p0.clone());
        let (mut t2, mut p2) = (theta0.clone(), p0.clone());
        for _ in 0..10 {
            (tl, pl) = leapfrog_step(&tl, &pl, 0.15, &mass, &m).unwrap();
            (t1, p1) = scheme1_step(&t1, &p1, 0.15, 1, &m).unwrap();
            (t2, p2) = scheme2_step(&t2, &p2, 0.15, 1, &m).unwrap();
        }
        assert!((&t1 - &tl).amax() <= 1e-12 && (&p1 - &pl).amax() <= 1e-12);
        assert!((&t2 - &tl).amax() <= 1e-12 && (&p2 - &pl).amax() <= 1e-12);
    }
}

#[test]
fn zero_step_is_identity() {
    let m = VaryingMetricGaussian { dim: 2 };
    let t = v(&[0.3, -0.7]);
    let p = v(&[0.5, 1.2]);
    assert_eq!(scheme1_step(&t, &p, 0.0, 2, &m).unwrap(), (t.clone(), p.clone()));
    assert_eq!(scheme2_step(&t, &p, 0.0, 2, &m).unwrap(), (t.clone(), p.clone()));
}

fn energy_error(scheme: Scheme, eps: f64, total: f64, n2: usize) -> f64 {
    let m = VaryingMetricGaussian { dim: 2 };
    let theta0 = v(&[0.8, -0.5]);
    let p0 = v(&[0.6, 0.9]);
    let start = PointEval::with_metric(&m, theta0.clone(), None).unwrap();
    let n1 = (total / eps).round() as usize;
    let cfg = IntegratorConfig::new(eps, n1, n2, scheme);
    let (end, p) = manifold_trajectory(&m, &start, &p0, &cfg).unwrap();
    (end.hamiltonian(&p) - hamiltonian(&theta0, &p0, &m).unwrap()).abs()
}

#[test]
fn energy_error_is_second_order_with_converged_position_update() {
    for scheme in [Scheme::Scheme1, Scheme::Scheme2] {
        let e: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&eps| energy_error(scheme, eps, 1.0, 3)).collect();
        for w in e.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.2..=4.8).contains(&ratio), "{scheme:?}: {e:?}");
        }
    }
}

#[test]
fn single_position_iteration_is_first_order_in_energy() {
    // One explicit position update makes the step asymmetric in θ.
    let e: Vec<f64> = [0.1, 0.05].iter().map(|&eps| energy_error(Scheme::Scheme1, eps, 1.0, 1)).collect();
    let ratio = e[0] / e[1];
    assert!((1.6..=2.4).contains(&ratio), "{e:?}");
}

fn scheme1_jacobian_det(theta: &DVector<f64>, p: &DVector<f64>, eps: f64, n2: usize) -> f64 {
    let m = VaryingMetricGaussian { dim: 2 };
    let z0 = concat(theta, p);
    jacobian(
        |z| {
            let (t, p) = split(z);
            let (t, p) = scheme1_step(&t, &p, eps, n2, &m).unwrap();
            concat(&t, &p)
        },
        &z0,
        1e-5,
    )
    .determinant()
}

#[test]
fn scheme1_preserves_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let t = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let p = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let det = scheme1_jacobian_det(&t, &p, 0.01, 3);
        assert!((det - 1.0).abs() < 1e-4, "det {det}");
    }
}

#[test]
fn scheme1_is_reversible() {
    let m = VaryingMetricGaussian { dim: 2 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps: f64 = 0.05;
    for _ in 0..100 {
        let t = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let p = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let (t1, p1) = scheme1_step(&t, &p, eps, 5, &m).unwrap();
        let (t2, p2) = scheme1_step(&t1, &-p1, eps, 5, &m).unwrap();
        let err = (t2 - &t).amax().max((p2 + &p).amax());
        assert!(err < 1e-3 * eps * eps, "reversibility error {err}");
    }
}

use approx::assert_relative_eq;
use geomc_core::finite_diff::{gradient, matrix_derivative, relative_error};
use geomc_core::{IntegratorConfig, KernelConfig, Scheme, SpdMatrix, TargetModel};
use geomc_models::stochvol::{
    ar1_precision, latent_metric, param_metric, simulate, SvLatentModel, SvParamModel, SvParams, SvPriors,
    SvSampler, SvState,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRUTH: SvParams = SvParams {
    beta: 0.65,
    sigma: 0.15,
    phi: 0.98,
};

fn dense_metric(phi: f64, sigma: f64, t: usize) -> DMatrix<f64> {
    latent_metric(phi, sigma, t).unwrap().matrix().to_dense()
}

#[test]
fn param_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = simulate(TRUTH, 200, &mut rng);
    let model = SvParamModel {
        y: &data.y,
        x: &data.x,
        priors: SvPriors::default(),
    };
    for _ in 0..100 {
        let theta = DVector::from_vec(vec![
            rng.random_range(0.3..1.5),
            rng.random_range(-3.0..0.0),
            rng.random_range(-0.5..3.0),
        ]);
        let g = model.grad_log_density(&theta).unwrap();
        let fd = gradient(|t| model.log_density(t).unwrap(), &theta, 1e-6);
        let err = relative_error(g.iter(), fd.iter());
        assert!(err < 1e-5, "gradient error {err} at {theta}");
    }
}

#[test]
fn beta_gradient_with_zero_observations() {
    let y = vec![0.0; 50];
    let x = vec![0.3; 50];
    let model = SvParamModel {
        y: &y,
        x: &x,
        priors: SvPriors::default(),
    };
    let beta = 0.8;
    let g = model.grad_log_density(&DVector::from_vec(vec![beta, -1.0, 1.0])).unwrap();
    assert_relative_eq!(g[0], -50.0 / beta - 1.0 / beta, epsilon = 1e-12);
}

#[test]
fn priors_match_direct_densities() {
    // Differences between two points cancel normalizing constants.
    let priors = SvPriors::default();
    let y = [0.1];
    let x = [0.0];
    let model = SvParamModel { y: &y, x: &x, priors };
    let direct = |beta: f64, gamma: f64, alpha: f64| -> [f64; 3] {
        let SvPriors { nu, s2, a, b } = priors;
        let sigma2 = (2.0 * gamma).exp();
        let phi = alpha.tanh();
        let u = (phi + 1.0) / 2.0;
        [
            // p(β²) ∝ β⁻², mapped to β via |dβ²/dβ| = 2β.
            -2.0 * beta.ln() + (2.0 * beta).ln(),
            -(nu / 2.0 + 1.0) * sigma2.ln() - nu * s2 / (2.0 * sigma2) + (2.0 * sigma2).ln(),
            (a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u).ln() + (0.5 * (1.0 - phi * phi)).ln(),
        ]
    };
    let p = [0.7, -1.9, 2.2];
    let q = [1.1, -1.2, 0.4];
    let dm = {
        let a = model.log_priors(&DVector::from_column_slice(&p));
        let b = model.log_priors(&DVector::from_column_slice(&q));
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    };
    let (a, b) = (direct(p[0], p[1], p[2]), direct(q[0], q[1], q[2]));
    for i in 0..3 {
        assert_relative_eq!(dm[i], a[i] - b[i], epsilon = 1e-10);
    }
}

#[test]
fn param_metric_values() {
    let g = param_metric(0.65, 1.0, 100).unwrap();
    assert_relative_eq!(g.matrix().to_dense()[(0, 0)], 473.3728, epsilon = 1e-4);
    assert!(g.derivs().dense(1, 3).iter().all(|v| *v == 0.0));

    let g = param_metric(0.65, 0.0, 100).unwrap().matrix().to_dense();
    assert_eq!(g[(1, 2)], 0.0);
    assert_eq!(g[(2, 2)], 99.0);
}

#[test]
fn param_metric_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dense = |t: &DVector<f64>| param_metric(t[0], t[2], 300).unwrap().matrix().to_dense();
    for _ in 0..50 {
        let theta = DVector::from_vec(vec![
            rng.random_range(0.3..1.5),
            rng.random_range(-3.0..0.0),
            rng.random_range(-2.0..3.0),
        ]);
        let bundle = param_metric(theta[0], theta[2], 300).unwrap();
        for k in 0..3 {
            let fd = matrix_derivative(dense, &theta, k, 1e-6);
            let err = relative_error(bundle.derivs().dense(k, 3).iter(), fd.iter());
            assert!(err < 1e-4, "derivative {k}: error {err}");
        }
    }
}

#[test]
fn param_metric_is_spd_on_grid() {
    for t in [2, 3, 10, 100, 2000] {
        for i in -20..=20 {
            let phi = 0.999 * i as f64 / 20.0;
            for beta in [0.1, 0.65, 3.0] {
                let g = param_metric(beta, phi.atanh(), t).unwrap().matrix().to_dense();
                assert!(SymmetricEigen::new(g).eigenvalues.min() > 0.0, "T={t} φ={phi}");
            }
        }
    }
}

#[test]
fn latent_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = simulate(TRUTH, 60, &mut rng);
    for _ in 0..50 {
        let params = SvParams {
            beta: rng.random_range(0.3..1.2),
            sigma: rng.random_range(0.05..0.6),
            phi: rng.random_range(-0.95..0.99),
        };
        let model = SvLatentModel { y: &data.y, params };
        let x = DVector::from_fn(60, |i, _| data.x[i] + rng.random_range(-0.5..0.5));
        let g = model.grad_log_density(&x).unwrap();
        let fd = gradient(|v| model.log_density(v).unwrap(), &x, 1e-6);
        let err = relative_error(g.iter(), fd.iter());
        assert!(err < 1e-5, "latent gradient error {err}");
    }
}

#[test]
fn latent_gradient_at_origin() {
    // With y ≡ 0 and x ≡ 0 only the −x/2 term of the observation density
    // contributes, so every component is −½.
    let y = vec![0.0; 8];
    let model = SvLatentModel {
        y: &y,
        params: SvParams {
            beta: 0.65,
            sigma: 0.3,
            phi: 0.0,
        },
    };
    let g = model.grad_log_density(&DVector::zeros(8)).unwrap();
    assert!(g.iter().all(|v| (*v + 0.5).abs() < 1e-15), "{g}");
}

#[test]
fn latent_gradient_three_points_by_hand() {
    let (beta, sigma, phi) = (0.7, 0.4, 0.6);
    let y: [f64; 3] = [0.3, -1.1, 0.5];
    let x: [f64; 3] = [0.2, -0.4, 0.9];
    let (b2, s2) = (beta * beta, sigma * sigma);
    let obs = |t: usize| -0.5 + y[t] * y[t] * (-x[t]).exp() / (2.0 * b2);
    let expected = [
        obs(0) - (x[0] * (1.0 - phi * phi) - phi * (x[1] - phi * x[0])) / s2,
        obs(1) - ((x[1] - phi * x[0]) - phi * (x[2] - phi * x[1])) / s2,
        obs(2) - (x[2] - phi * x[1]) / s2,
    ];
    let model = SvLatentModel {
        y: &y,
        params: SvParams { beta, sigma, phi },
    };
    let g = model.grad_log_density(&DVector::from_column_slice(&x)).unwrap();
    for t in 0..3 {
        assert_relative_eq!(g[t], expected[t], epsilon = 1e-12);
    }
}

#[test]
fn ar1_precision_properties() {
    let (diag, off) = ar1_precision(0.0, 0.5, 6);
    assert!(diag.iter().all(|d| *d == 4.0));
    assert!(off.iter().all(|o| *o == 0.0));

    for &(phi, sigma) in &[(0.98, 0.15), (-0.5, 1.3), (0.3, 0.7)] {
        let t = 40;
        let (diag, off) = ar1_precision(phi, sigma, t);
        let prec = SpdMatrix::Tridiagonal { diag, off }.to_dense();
        let cov = DMatrix::from_fn(t, t, |i, j| {
            phi.powi((i as i32 - j as i32).abs()) * sigma * sigma / (1.0 - phi * phi)
        });
        let id = &prec * &cov;
        let err = (id - DMatrix::identity(t, t)).abs().max();
        assert!(err < 1e-8, "C⁻¹C − I = {err}");
    }
}

#[test]
fn tridiagonal_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in [1, 2, 50, 200] {
        for _ in 0..10 {
            let phi = rng.random_range(-0.99..0.99);
            let sigma = rng.random_range(0.05..2.0);
            let bundle = latent_metric(phi, sigma, t).unwrap();
            let dense = dense_metric(phi, sigma, t);
            let chol = dense.clone().cholesky().unwrap();
            let b = DVector::from_fn(t, |_, _| rng.random_range(-1.0..1.0));
            let banded = bundle.solve(&b);
            let direct = chol.solve(&b);
            let err = (&banded - &direct).abs().max() / direct.abs().max();
            assert!(err < 1e-10, "solve error {err}");
            let logdet = 2.0 * chol.l().diagonal().map(f64::ln).sum();
            assert_relative_eq!(bundle.logdet(), logdet, max_relative = 1e-10);
        }
    }
}

#[test]
fn simulate_degenerate_and_independent_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flat = simulate(
        SvParams {
            beta: 0.65,
            sigma: 0.0,
            phi: 0.9,
        },
        100,
        &mut rng,
    );
    assert!(flat.x.iter().all(|x| *x == 0.0));
    // y = εβ, so y/β is standard normal.
    let var = flat.y.iter().map(|y| (y / 0.65).powi(2)).sum::<f64>() / 100.0;
    assert!((var - 1.0).abs() < 0.5);

    let t = 20_000;
    let iid = simulate(
        SvParams {
            beta: 1.0,
            sigma: 0.5,
            phi: 0.0,
        },
        t,
        &mut rng,
    );
    let r1 = geomc_core::autocorr(&iid.x, 1).unwrap();
    assert!(r1.abs() < 3.0 / (t as f64).sqrt(), "lag-1 autocorrelation {r1}");
}

#[test]
fn frozen_sweep_leaves_state_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = simulate(TRUTH, 30, &mut rng);
    let state = SvState {
        theta: TRUTH.transformed(),
        x: data.x.clone(),
    };
    let frozen = KernelConfig::rmhmc(IntegratorConfig::new(0.0, 5, 2, Scheme::Scheme1));
    let mut sampler = SvSampler::new(&frozen, &frozen, &data.y, &state, SvPriors::default()).unwrap();
    let mut s = state.clone();
    for _ in 0..5 {
        sampler.sweep(&data.y, &mut s, &mut rng).unwrap();
    }
    assert_eq!(s, state);
}

#[test]
fn short_gibbs_run_moves_towards_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = simulate(TRUTH, 300, &mut rng);
    let state = SvState {
        theta: SvParams {
            beta: 1.0,
            sigma: 0.3,
            phi: 0.8,
        }
        .transformed(),
        x: vec![0.0; 300],
    };
    let params = KernelConfig::rmhmc(IntegratorConfig::new(0.5, 6, 3, Scheme::Scheme1));
    let latent = KernelConfig::rmhmc(IntegratorConfig::new(0.1, 50, 1, Scheme::Scheme1));
    let mut sampler = SvSampler::new(&params, &latent, &data.y, &state, SvPriors::default()).unwrap();
    let run = geomc_models::stochvol::run_gibbs(&data.y, state, &mut sampler, 300, 300, &mut rng).unwrap();
    let phi_mean = run.params.column(2).mean();
    assert!(run.param_acceptance > 0.3 && run.latent_acceptance > 0.3);
    assert!(phi_mean > 0.85, "φ mean {phi_mean}");
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn transformed_round_trip(beta in 0.01..5.0f64, sigma in 0.01..3.0f64, phi in -0.999..0.999f64) {
        let p = SvParams { beta, sigma, phi };
        let back = SvParams::from_transformed(&p.transformed());
        prop_assert!((back.beta - beta).abs() < 1e-12);
        prop_assert!((back.sigma - sigma).abs() < 1e-12);
        prop_assert!((back.phi - phi).abs() < 1e-12);
    }
}

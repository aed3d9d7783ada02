mod support;

use kldpid::error::Error;
use kldpid::gp::{FitConfig, GPModel};
use kldpid::linalg::min_eigenvalue;
use kldpid::optim::MinimizeConfig;
use kldpid::plant::{draw_noise, step, PlantParams, PlantState};
use kldpid::policy_search::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

fn small_model(seed: u64, n: usize) -> GPModel {
    let (x, y) = plant_transitions(seed, n, [0.2, 0.5, 0.2, 0.5], &PlantParams::default(), |_, rng| {
        rng.random_range(-10.0..10.0)
    });
    GPModel::fit(&x, &y, &FitConfig { restarts: 1, ..Default::default() }, seed).unwrap()
}

fn small_policy(seed: u64, n_basis: usize) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = PolicyInit { n_basis, weight_std: 0.5, ..Default::default() };
    PolicyParams::random(&init, 10.0, &mut rng).unwrap()
}

fn short_cost(horizon: usize) -> CostConfig {
    CostConfig { horizon, ..Default::default() }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let gp = small_model(seed, 40);
        let policy = small_policy(seed + 10, 5);
        let err = policy_gradient_rel_error(&gp, &policy, &short_cost(6));
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn zero_horizon_costs_only_the_initial_state() {
    let gp = small_model(1, 30);
    let cost = short_cost(0);
    let r = predict_rollout(&gp, &small_policy(2, 4), &cost).unwrap();
    let direct = expected_cost(&DVector::zeros(4), &cost.init_cov_matrix(), &cost).unwrap();
    assert_eq!(r.means.len(), 1);
    assert_eq!(r.total_cost, direct);
}

#[test]
fn cost_to_go_is_bounded_and_covariances_stay_psd() {
    let gp = small_model(3, 60);
    let cost = short_cost(20);
    for seed in 0..5 {
        let r = predict_rollout(&gp, &small_policy(seed, 8), &cost).unwrap();
        assert!(r.total_cost >= 0.0 && r.total_cost <= (cost.horizon + 1) as f64);
        for s in &r.covs {
            assert!((s - s.transpose()).amax() < 1e-12);
            assert!(min_eigenvalue(s) >= -1e-12);
        }
    }
}

#[test]
fn expected_cost_agrees_with_monte_carlo() {
    let cost = CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let m = DVector::from_fn(4, |_, _| 0.2 * normal(&mut rng));
        let a = DMatrix::from_fn(4, 4, |_, _| 0.1 * normal(&mut rng));
        let s = &a * a.transpose();
        let l = (&s + DMatrix::identity(4, 4) * 1e-12).cholesky().unwrap().l();
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = &m + &l * DVector::from_fn(4, |_, _| normal(&mut rng));
            let c = cost.cost(&PlantState::from_slice(x.as_slice()));
            sum += c;
            sum_sq += c * c;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let analytic = expected_cost(&m, &s, &cost).unwrap();
        assert!((analytic - mean).abs() < 3.0 * se, "{analytic} vs {mean} +- {se}");
    }
}

#[test]
fn predicted_first_step_matches_plant_monte_carlo() {
    let params = PlantParams::default();
    let policy = small_policy(6, 10);
    // closed-loop transitions from the initial-state distribution
    let (x, y) = plant_transitions(5, 500, [0.05; 4], &params, |s, _| policy.eval(s));
    let gp = GPModel::fit(&x, &y, &FitConfig::default(), 5).unwrap();
    let cost = CostConfig::default();
    let predicted = predict_rollout(&gp, &policy, &cost).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    for _ in 0..n {
        let s0 = sample_initial_state(&cost, &mut rng).unwrap();
        let noise = draw_noise(&params, &mut rng);
        let s1 = step(&s0, policy.eval(&s0), &params, (0.0, 0.0), &noise).unwrap().to_array();
        for d in 0..4 {
            sum[d] += s1[d];
            sum_sq[d] += s1[d] * s1[d];
        }
    }
    // A 500-point model can only pin the mean down to its own posterior
    // uncertainty, so that is added to the Monte Carlo standard error.
    let mut query = cost.init_mean.to_array().to_vec();
    query.push(policy.eval(&cost.init_mean));
    let (_, pred_var) = gp.predict(&query);
    for d in 0..4 {
        let mean = sum[d] / n as f64;
        let mc_var = (sum_sq[d] / n as f64 - mean * mean) / n as f64;
        let model_var = pred_var[d] - gp.hyperparams()[d].noise_variance;
        let se = (mc_var + model_var).sqrt();
        let p = predicted.means[1][d];
        assert!((p - mean).abs() < 3.0 * se, "state {d}: predicted {p} vs {mean} +- {se} (mc {})", mc_var.sqrt());
    }
}

#[test]
fn single_basis_linearization() {
    let s = PlantState::new(0.1, -0.3, 0.05, 0.2);
    let policy = |w: f64| PolicyParams {
        centers: DMatrix::from_row_slice(1, 4, &s.to_array()),
        weights: DVector::from_element(1, w),
        lengthscales: DVector::from_element(4, 0.7),
        u_max: 10.0,
    };
    let h = 1e-6;
    let slope = (policy(h).eval(&s) - policy(-h).eval(&s)) / (2.0 * h);
    assert!((slope - 10.0 * (9.0 / 8.0 + 3.0 / 8.0)).abs() < 1e-6);
    let w = 1e-3;
    assert!((policy(w).eval(&s) - 10.0 * w * 1.5).abs() < 1e-6);
}

/// `J(phi) = 1/2 (phi - phi*)^T A (phi - phi*)` for a fixed SPD `A`.
struct Quadratic {
    a: DMatrix<f64>,
    target: DVector<f64>,
}

impl PolicyObjective for Quadratic {
    fn value(&mut self, p: &PolicyParams) -> kldpid::Result<f64> {
        let d = p.to_flat() - &self.target;
        Ok(0.5 * d.dot(&(&self.a * &d)))
    }

    fn value_and_gradient(&mut self, p: &PolicyParams) -> kldpid::Result<(f64, DVector<f64>)> {
        let d = p.to_flat() - &self.target;
        let g = &self.a * &d;
        Ok((0.5 * d.dot(&g), g))
    }
}

#[test]
fn quadratic_surrogate_converges_to_its_minimizer() {
    let policy0 = small_policy(8, 6);
    let n = policy0.to_flat().len();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = DMatrix::from_fn(n, n, |_, _| normal(&mut rng) / (n as f64).sqrt());
    let a = &b * b.transpose() + DMatrix::identity(n, n);
    let target = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut obj = Quadratic { a, target: target.clone() };
    let cfg = MinimizeConfig { max_iters: 500, grad_tol: 1e-10, ..Default::default() };
    let res = optimize_policy_with(&mut obj, &policy0, &cfg).unwrap();
    let err = (res.policy.to_flat() - target).amax();
    assert!(err < 1e-4, "distance to minimizer {err:e}");
    assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
}

struct Unreachable(f64);

impl PolicyObjective for Unreachable {
    fn value(&mut self, _: &PolicyParams) -> kldpid::Result<f64> {
        Err(Error::Domain("no feasible neighbour".into()))
    }

    fn value_and_gradient(&mut self, p: &PolicyParams) -> kldpid::Result<(f64, DVector<f64>)> {
        Ok((self.0, DVector::from_element(p.to_flat().len(), 1.0)))
    }
}

#[test]
fn failed_line_search_returns_the_start_with_a_stall_flag() {
    let policy0 = small_policy(10, 3);
    let res = optimize_policy_with(&mut Unreachable(2.0), &policy0, &default_policy_optimizer()).unwrap();
    assert!(res.stalled);
    assert_eq!(res.policy, policy0);
    assert_eq!(res.final_cost, 2.0);
}

#[test]
fn policy_optimization_is_monotone_and_terminates() {
    let gp = small_model(11, 60);
    let cost = short_cost(10);
    let policy0 = small_policy(12, 10);
    let cfg = MinimizeConfig { max_iters: 15, ..default_policy_optimizer() };
    let res = optimize_policy(&gp, &policy0, &cost, &cfg).unwrap();
    assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(res.final_cost <= res.initial_cost);
    let j = predict_rollout(&gp, &res.policy, &cost).unwrap().total_cost;
    assert!((j - res.final_cost).abs() < 1e-12);
    assert!(res.gradient_norm < 1e-2 * (1.0 + j.abs()) || res.iterations == cfg.max_iters);
}

#[test]
fn initial_policy_weights_follow_the_sampling_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let init = PolicyInit { n_basis: 20_000, weight_std: 0.3, ..Default::default() };
    let p = PolicyParams::random(&init, 10.0, &mut rng).unwrap();
    let n = p.weights.len() as f64;
    let mean = p.weights.sum() / n;
    let sd = (p.weights.map(|w| (w - mean).powi(2)).sum() / n).sqrt();
    assert!(mean.abs() < 3.0 * 0.3 / n.sqrt());
    assert!((sd / 0.3 - 1.0).abs() < 0.02);
}

fn tiny_loop_config() -> LoopConfig {
    LoopConfig {
        max_iters: 2,
        stop_when_learned: false,
        init: PolicyInit { n_basis: 5, ..Default::default() },
        gp: FitConfig { restarts: 1, ..Default::default() },
        optimizer: MinimizeConfig { max_iters: 3, ..default_policy_optimizer() },
        ..Default::default()
    }
}

#[test]
fn loop_bookkeeping_and_reproducibility() {
    let cost = short_cost(15);
    let cfg = tiny_loop_config();
    let (a, _) = pilco_loop(&PlantParams::default(), &cost, &cfg, 21).unwrap();
    assert!(a.abort.is_none(), "{:?}", a.abort);
    assert_eq!(a.log.len(), cfg.max_iters + 1);
    assert_eq!(a.log[0].j_predicted, None);
    for (k, _) in a.log.iter().enumerate() {
        let transitions: usize = a.trajectories[..=k].iter().map(|t| t.controls.len()).sum();
        assert_eq!(transitions, (k + 1) * cost.horizon);
    }
    // parameters are resampled per rollout
    assert_ne!(a.trajectories[0].params_used, a.trajectories[1].params_used);

    let (b, _) = pilco_loop(&PlantParams::default(), &cost, &cfg, 21).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert!((x.j_realized - y.j_realized).abs() < 1e-12);
        assert_eq!(x.j_predicted.is_some(), y.j_predicted.is_some());
        if let (Some(p), Some(q)) = (x.j_predicted, y.j_predicted) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    let mut csv = Vec::new();
    write_log_csv(&a.log, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("iter,J_predicted,J_realized\n0,,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn control_never_exceeds_the_bound(seed in 0u64..10_000, x in -3.0..3.0f64, v in -5.0..5.0f64, th in -3.0..3.0f64, w in -5.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = PolicyInit { n_basis: 10, weight_std: 5.0, ..Default::default() };
        let p = PolicyParams::random(&init, 10.0, &mut rng).unwrap();
        prop_assert!(p.eval(&PlantState::new(x, v, th, w)).abs() <= 10.0 + 1e-12);
    }
}

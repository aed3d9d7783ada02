//! Property suites for the structural invariants. Each runs a deterministic
//! proptest runner and reports the first minimal failure.

use kldpid::dataset::{augment, compute_errors, CART_POLE_CHANNELS};
use kldpid::distill::{kld_discrete, pid_features, PidState};
use kldpid::plant::{rollout, step, PlantParams, PlantState, Trajectory};
use kldpid::roa::{level_set, lyapunov_value, sample_grid, LyapunovFit, LyapunovSample};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::normal;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn state_strategy() -> impl Strategy<Value = PlantState> {
    (-1.0..1.0f64, -2.0..2.0f64, -1.5..1.5f64, -3.0..3.0f64).prop_map(|(a, b, c, d)| PlantState::new(a, b, c, d))
}

/// Random trajectory with `n` controls.
pub fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
    let states: Vec<PlantState> =
        (0..=n).map(|_| PlantState::new(normal(rng), normal(rng), 0.3 * normal(rng), normal(rng))).collect();
    Trajectory {
        controls: (0..n).map(|_| normal(rng)).collect(),
        times: (0..=n).map(|k| k as f64 * 0.05).collect(),
        states,
        params_used: PlantParams::default(),
    }
}

/// Frictionless, unforced, noise-free motion conserves mechanical energy to
/// 1e-6 relative over 1000 steps from any initial state.
pub fn energy_conservation(cases: u32) -> Result<(), String> {
    let p = PlantParams { cart_friction: 0.0, noise_var: [0.0; 4], ..PlantParams::default() };
    let strategy = (-0.5..0.5f64, -3.1..3.1f64, -2.0..2.0f64);
    run(cases, strategy, |(v, th, w)| {
        let s0 = PlantState::new(0.0, v, th, w);
        let traj = rollout(|_| 0.0, s0, 1000, &p, None, 0).unwrap();
        let e0 = p.energy(&s0);
        // scale by the potential energy range so states near zero energy are not ill-posed
        let scale = e0.abs().max(p.pendulum_mass * p.gravity * p.pole_length);
        let worst = traj.states.iter().map(|s| (p.energy(s) - e0).abs() / scale).fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "relative energy drift {worst:e} from {s0}");
        Ok(())
    })
}

/// `f(-s, -u, -tau) = -f(s, u, tau)` for one step.
pub fn odd_symmetry(cases: u32) -> Result<(), String> {
    run(cases, (state_strategy(), -12.0..12.0f64, -0.5..0.5f64), |(s, u, tau)| {
        let p = PlantParams::default();
        let a = step(&s, u, &p, (0.0, tau), &[0.0; 4]).unwrap();
        let neg = PlantState::from_vector(&(-s.to_vector()));
        let b = step(&neg, -u, &p, (0.0, -tau), &[0.0; 4]).unwrap();
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            prop_assert!((x + y).abs() < 1e-12);
        }
        Ok(())
    })
}

/// Integral features telescope exactly, the first derivative is zero, and
/// shuffling the trajectories only permutes the augmented rows.
pub fn dataset_telescoping(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..6, 1usize..40), |(seed, count, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dt = rng.random_range(0.01..0.2);
        let x_des = PlantState::new(normal(&mut rng), 0.0, 0.1 * normal(&mut rng), 0.0);
        let trajs: Vec<Trajectory> = (0..count)
            .map(|_| {
                let len = n + rng.random_range(0..5);
                let mut t = random_trajectory(&mut rng, len);
                t.params_used.dt = dt;
                t
            })
            .collect();
        for t in &trajs {
            let recs = compute_errors(t, &x_des, &CART_POLE_CHANNELS, dt).unwrap();
            prop_assert_eq!(recs[0].derivative.clone(), vec![0.0; 2]);
            for c in 0..2 {
                prop_assert_eq!(recs[0].integral[c], dt * recs[0].proportional[c]);
                for k in 1..recs.len() {
                    prop_assert_eq!(recs[k].integral[c], recs[k - 1].integral[c] + dt * recs[k].proportional[c]);
                }
            }
        }
        let data = augment(&trajs, &x_des, &CART_POLE_CHANNELS, dt).unwrap();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Trajectory> = order.iter().map(|&i| trajs[i].clone()).collect();
        let other = augment(&shuffled, &x_des, &CART_POLE_CHANNELS, dt).unwrap();
        let rows = |d: &kldpid::dataset::AugmentedDataset| {
            let mut r: Vec<Vec<u64>> = (0..d.rows())
                .map(|i| d.features.row(i).iter().chain(d.controls.row(i).iter()).map(|v| v.to_bits()).collect())
                .collect();
            r.sort();
            r
        };
        prop_assert_eq!(rows(&data), rows(&other));
        Ok(())
    })
}

/// The online controller's feature rows equal the offline dataset rows.
pub fn offline_online_equivalence(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..60), |(seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = random_trajectory(&mut rng, n);
        let x_des = PlantState::new(0.1, 0.0, -0.05, 0.0);
        let offline = compute_errors(&traj, &x_des, &CART_POLE_CHANNELS, 0.05).unwrap();
        let mut st = PidState::default();
        for (s, rec) in traj.states.iter().zip(&offline) {
            let e: Vec<f64> = CART_POLE_CHANNELS.iter().map(|&c| x_des.to_array()[c] - s.to_array()[c]).collect();
            let (f, next) = pid_features(&st, &e, 0.05);
            prop_assert_eq!(f, rec.features());
            st = next;
        }
        let data = augment(std::slice::from_ref(&traj), &x_des, &CART_POLE_CHANNELS, 0.05).unwrap();
        for (r, rec) in offline.iter().take(n).enumerate() {
            prop_assert_eq!(data.features.row(r).iter().copied().collect::<Vec<_>>(), rec.features());
        }
        Ok(())
    })
}

/// Discrete KL divergence is non-negative and zero on identical grids.
pub fn kld_non_negativity(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..40), |(seed, cells)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DMatrix::from_fn(cells, 3, |_, _| rng.random::<f64>());
        let mut q = DMatrix::from_fn(cells, 3, |_, _| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() });
        if q.sum() == 0.0 {
            q[(0, 0)] = 1.0;
        }
        p /= p.sum();
        q /= q.sum();
        prop_assert!(kld_discrete(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kld_discrete(&p, &p).unwrap(), 0.0);
        Ok(())
    })
}

/// Lyapunov values are non-negative and finite exactly when converged.
pub fn lyapunov_non_negativity(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..80, 0.01f64..2.0), |(seed, n, tol)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powf(rng.random_range(-3.0..0.0));
        let mut traj = random_trajectory(&mut rng, n);
        for s in &mut traj.states {
            *s = PlantState::from_vector(&(s.to_vector() * scale));
        }
        let (v, converged) = lyapunov_value(&traj, &PlantState::zeros(), 0.05, tol);
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v.is_finite(), converged);
        Ok(())
    })
}

pub fn random_fit(rng: &mut ChaCha8Rng) -> LyapunovFit {
    // A = L L^T with a positive diagonal keeps the quadratic part definite
    let (l11, l21, l22) = (rng.random_range(0.3..3.0), rng.random_range(-1.0..1.0), rng.random_range(0.3..3.0));
    let (a, b, c) = (l11 * l11, 2.0 * l11 * l21, l21 * l21 + l22 * l22);
    LyapunovFit { coeffs: [a, b, c, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)], r2: 1.0 }
}

/// The level set holds only converged samples, and the next sample level up
/// admits a non-converged one.
pub fn level_set_maximality(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 3usize..15, 0.0f64..0.5), |(seed, res, noise)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = random_fit(&mut rng);
        let threshold = rng.random_range(0.1..3.0);
        let samples: Vec<LyapunovSample> = sample_grid((-1.0, 1.0), (-1.0, 1.0), res)
            .unwrap()
            .into_iter()
            .map(|(t, td)| {
                let converged = fit.value(t, td) + noise * rng.random_range(-1.0..1.0) < threshold;
                LyapunovSample { theta0: t, theta_dot0: td, v: if converged { 1.0 } else { f64::INFINITY }, converged }
            })
            .collect();
        let values: Vec<(f64, bool)> = samples.iter().map(|s| (fit.value(s.theta0, s.theta_dot0), s.converged)).collect();
        match level_set(&fit, &samples) {
            Ok(c) => {
                prop_assert!(values.iter().filter(|(v, _)| *v <= c).all(|(_, ok)| *ok));
                prop_assert!(values.iter().any(|(v, ok)| *ok && *v == c));
                let next = values.iter().filter(|(v, _)| *v > c).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
                if next.is_finite() {
                    let tie = 1e-9 * next.abs().max(1.0);
                    prop_assert!(values.iter().any(|(v, ok)| !*ok && *v <= next + tie));
                }
            }
            Err(e) => {
                prop_assert!(matches!(e, kldpid::Error::EmptyRoa));
                let lowest = values.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
                prop_assert!(!lowest.1);
            }
        }
        Ok(())
    })
}

/// A suite run with the given number of cases.
pub type Suite = fn(u32) -> Result<(), String>;

/// Every invariant suite with its name, for reporting.
pub const SUITES: [(&str, Suite); 7] = [
    ("plant energy conservation", energy_conservation),
    ("plant odd symmetry", odd_symmetry),
    ("dataset telescoping", dataset_telescoping),
    ("offline/online PID features", offline_online_equivalence),
    ("KLD non-negativity and identity", kld_non_negativity),
    ("ROA V non-negativity", lyapunov_non_negativity),
    ("ROA level-set maximality", level_set_maximality),
];

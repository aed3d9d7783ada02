mod support;

use kldpid::dataset::{AugmentedDataset, CART_POLE_CHANNELS};
use kldpid::distill::*;
use kldpid::plant::{PlantParams, PlantState};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

/// Independent log-density of `N(mean, s^2)`.
fn log_normal_pdf(x: f64, mean: f64, s: f64) -> f64 {
    let z = (x - mean) / s;
    -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn likelihood_gradient_matches_finite_differences_on_100_instances() {
    let worst = (0..100).map(likelihood_gradient_rel_error).fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn gradient_vanishes_at_the_least_squares_gains() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = random_dataset(&mut rng, 200, 2, 1);
    let mut g = closed_form_gains(&data, PidStructure::Coupled).unwrap();
    g.sigma = vec![1.0];
    let grad = pid_nll_gradient(&data, &g, false).unwrap();
    assert!(grad.norm() < 1e-8 * data.rows() as f64, "{}", grad.norm());
}

#[test]
fn zero_dataset_has_zero_gradient() {
    let data = AugmentedDataset {
        features: DMatrix::zeros(10, 6),
        controls: DMatrix::zeros(10, 1),
        channels: vec![0, 2],
        sources: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = PidGains::random(PidStructure::Coupled, 1, &[0, 2], 1.0, &mut rng).unwrap();
    assert_eq!(pid_nll_gradient(&data, &g, false).unwrap().norm(), 0.0);
}

#[test]
fn zero_residual_likelihood_is_the_normalizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut data = random_dataset(&mut rng, 25, 2, 1);
    let g = random_gains(&mut rng, PidStructure::Coupled, 1, 2);
    data.controls = &data.features * g.k.transpose();
    let s = g.sigma[0];
    let expected = 25.0 * 0.5 * (2.0 * std::f64::consts::PI * s * s).ln();
    assert!((pid_nll(&data, &g).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn objective_differences_equal_cross_entropy_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = random_dataset(&mut rng, 40, 2, 1);
    let a = random_gains(&mut rng, PidStructure::Coupled, 1, 2);
    let mut b = random_gains(&mut rng, PidStructure::Coupled, 1, 2);
    b.sigma = a.sigma.clone();
    let cross_entropy = |g: &PidGains| -> f64 {
        (0..data.rows())
            .map(|r| {
                let mean: f64 = (0..6).map(|j| g.k[(0, j)] * data.features[(r, j)]).sum();
                // a policy-independent per-row term (the expert's own log
                // density) must cancel in differences
                let constant = 0.37 * r as f64;
                -log_normal_pdf(data.controls[(r, 0)], mean, g.sigma[0]) + constant
            })
            .sum()
    };
    let lhs = pid_nll(&data, &a).unwrap() - pid_nll(&data, &b).unwrap();
    let rhs = cross_entropy(&a) - cross_entropy(&b);
    assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
}

#[test]
fn exact_linear_data_is_identified() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut data = random_dataset(&mut rng, 60, 2, 2);
    let truth = random_gains(&mut rng, PidStructure::Coupled, 2, 2);
    data.controls = &data.features * truth.k.transpose();
    let g = closed_form_gains(&data, PidStructure::Coupled).unwrap();
    assert!((&g.k - &truth.k).amax() < 1e-10);
}

#[test]
fn decoupled_pattern_survives_every_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = random_dataset(&mut rng, 80, 2, 2);
    let mask = PidStructure::Decoupled.mask(2, 2).unwrap();
    let cf = closed_form_gains(&data, PidStructure::Decoupled).unwrap();
    let g0 = PidGains::random(PidStructure::Decoupled, 2, &[0, 1], 1.0, &mut rng).unwrap();
    let fit = minimize_kld(&data, &g0, &DistillConfig::default()).unwrap();
    for g in [&cf.k, &fit.gains.k] {
        for (v, free) in g.iter().zip(mask.iter()) {
            if !free {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn learning_sigma_recovers_the_residual_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut data = random_dataset(&mut rng, 400, 2, 1);
    let truth = random_gains(&mut rng, PidStructure::Coupled, 1, 2);
    data.controls = &data.features * truth.k.transpose() + DMatrix::from_fn(400, 1, |_, _| 0.7 * normal(&mut rng));
    let g0 = PidGains::zeros(PidStructure::Coupled, 1, &[0, 1], 1.0).unwrap();
    let cfg = DistillConfig { learn_sigma: true, ..Default::default() };
    let fit = minimize_kld(&data, &g0, &cfg).unwrap();
    let cf = closed_form_gains(&data, PidStructure::Coupled).unwrap();
    assert!((fit.gains.sigma[0] - cf.sigma[0]).abs() < 1e-4 * cf.sigma[0]);
    assert!((&fit.gains.k - &cf.k).norm() < 1e-4 * cf.k.norm());
}

#[test]
fn non_finite_data_is_a_data_quality_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut data = random_dataset(&mut rng, 10, 2, 1);
    data.controls[(3, 0)] = 1e300;
    data.features[(3, 0)] = 1e300;
    let g0 = PidGains::zeros(PidStructure::Coupled, 1, &[0, 1], 1e-300).unwrap();
    assert!(minimize_kld(&data, &g0, &DistillConfig::default()).is_err());
}

#[test]
fn kde_matches_the_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a: Vec<f64> = (0..10_000).map(|_| normal(&mut rng)).collect();
    let b: Vec<f64> = (0..10_000).map(|_| normal(&mut rng)).collect();
    let grid = GridSpec { a_range: (-4.0, 4.0), b_range: (-4.0, 4.0), a_cells: 64, b_cells: 64 };
    let d = kde_joint(&a, &b, &grid, Bandwidth::Silverman).unwrap();
    assert!((d.density.sum() * grid.cell_area() - 1.0).abs() < 1e-6);
    let mut sup: f64 = 0.0;
    for i in 0..64 {
        for j in 0..64 {
            let (x, y) = (grid.a_center(i), grid.b_center(j));
            let pdf = (-0.5 * (x * x + y * y)).exp() / (2.0 * std::f64::consts::PI);
            sup = sup.max((d.density[(i, j)] - pdf).abs());
        }
    }
    assert!(sup < 0.05, "sup-norm {sup}");
}

#[test]
fn density_csv_has_metadata_and_header() {
    let grid = GridSpec { a_range: (0.0, 1.0), b_range: (0.0, 1.0), a_cells: 2, b_cells: 3 };
    let d = kde_joint(&[0.2, 0.8], &[0.3, 0.6], &grid, Bandwidth::Fixed(0.3, 0.3)).unwrap();
    let mut buf = Vec::new();
    d.write_csv(&mut buf, "u", "x").unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# u_min=0,u_max=1,u_cells=2,x_min=0"));
    assert_eq!(lines[1], "u,x,density");
    assert_eq!(lines.len(), 2 + 6);
}

#[test]
fn gains_file_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = random_gains(&mut rng, PidStructure::Coupled, 1, 2);
    let g = PidGains { channels: CART_POLE_CHANNELS.to_vec(), ..g };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gains.json");
    g.save_json(&path).unwrap();
    assert_eq!(PidGains::load_json(&path).unwrap(), g);
}

#[test]
fn expert_collection_counts_and_is_deterministic() {
    let plant = PlantParams::default();
    let policy = |s: &PlantState| 20.0 * s.theta + 3.0 * s.theta_dot + 0.5 * s.x + 1.0 * s.x_dot;
    let one = ExpertConfig { n_rollouts: 1, horizon: 30, ..Default::default() };
    let d = collect_expert_data(&plant, policy, &one, 3).unwrap();
    assert_eq!(d.dataset.rows() + 30 * d.dropped, 30);
    let cfg = ExpertConfig { n_rollouts: 4, horizon: 20, ..Default::default() };
    let a = collect_expert_data(&plant, policy, &cfg, 7).unwrap();
    let b = collect_expert_data(&plant, policy, &cfg, 7).unwrap();
    assert_eq!(a.dataset, b.dataset);
}

#[test]
fn pd_layout_fits_least_squares_on_the_remaining_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = random_dataset(&mut rng, 150, 2, 1);
    let g0 = PidGains::random(PidStructure::Coupled, 1, &[0, 1], 1.0, &mut rng).unwrap().without_integral();
    let fit = minimize_kld(&data, &g0, &DistillConfig::default()).unwrap();
    assert!(!fit.gains.integral);
    assert_eq!((fit.gains.k[(0, 2)], fit.gains.k[(0, 3)]), (0.0, 0.0));
    // normal equations on the P and D columns only
    let cols = [0usize, 1, 4, 5];
    let x = DMatrix::from_fn(data.rows(), 4, |r, j| data.features[(r, cols[j])]);
    let y = data.controls.column(0).clone_owned();
    let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * y)).unwrap();
    for (j, &c) in cols.iter().enumerate() {
        assert!((fit.gains.k[(0, c)] - beta[j]).abs() < 1e-3 * beta.norm(), "column {c}");
    }
    let cf = closed_form_gains_with(&data, PidStructure::Coupled, false).unwrap();
    assert!((&cf.k - &fit.gains.k).norm() < 1e-3 * cf.k.norm());
}

#[test]
fn falling_expert_yields_an_empty_data_error() {
    let plant = PlantParams::default();
    let cfg = ExpertConfig { n_rollouts: 3, horizon: 100, init_std: [0.0, 0.0, 0.0, 0.0], init_mean: PlantState::new(0.0, 0.0, 0.2, 0.0), ..Default::default() };
    assert!(matches!(collect_expert_data(&plant, |_| 0.0, &cfg, 1), Err(kldpid::Error::EmptyData(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn minimize_kld_agrees_with_least_squares(seed in 0u64..10_000, rows in 20usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_dataset(&mut rng, rows, 2, 1);
        let g0 = PidGains::random(PidStructure::Coupled, 1, &[0, 1], 1.0, &mut rng).unwrap();
        let fit = minimize_kld(&data, &g0, &DistillConfig::default()).unwrap();
        let cf = closed_form_gains(&data, PidStructure::Coupled).unwrap();
        prop_assert!((&fit.gains.k - &cf.k).norm() < 1e-3 * cf.k.norm());
        prop_assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

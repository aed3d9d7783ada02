//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the derivative code under test.

#![allow(dead_code)]

pub mod invariants;

use kldpid::dataset::AugmentedDataset;
use kldpid::distill::{pid_nll, pid_nll_gradient, PidGains, PidStructure};
use kldpid::gp::{head_log_marginal_likelihood, GPModel, KernelHyperparams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random regression instance with random hyperparameters.
pub fn random_gp_instance(seed: u64, n: usize, dim: usize) -> (DMatrix<f64>, DVector<f64>, KernelHyperparams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0));
    let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 1.3).sin() + 0.1 * normal(&mut rng));
    let hp = KernelHyperparams {
        lengthscales: (0..dim).map(|_| rng.random_range(0.4..2.5)).collect(),
        signal_variance: rng.random_range(0.3..2.0),
        noise_variance: rng.random_range(0.005..0.2),
    };
    (x, y, hp)
}

/// Relative error (vector norm) between the analytic evidence gradient
/// and central differences in log-space.
pub fn evidence_gradient_rel_error(seed: u64) -> f64 {
    let (x, y, hp) = random_gp_instance(seed, 20, 3);
    let (_, g) = head_log_marginal_likelihood(&x, &y, &hp).unwrap();
    let theta = hp.to_log();
    let h = 1e-5;
    let fd = DVector::from_fn(theta.len(), |k, _| {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[k] += h;
        tm[k] -= h;
        let fp = head_log_marginal_likelihood(&x, &y, &KernelHyperparams::from_log(&tp)).unwrap().0;
        let fm = head_log_marginal_likelihood(&x, &y, &KernelHyperparams::from_log(&tm)).unwrap().0;
        (fp - fm) / (2.0 * h)
    });
    (&g - &fd).norm() / fd.norm().max(1e-12)
}

/// Small two-output GP on 3-D inputs with hand-chosen hyperparameters.
pub fn small_gp(seed: u64) -> GPModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 30;
    let x: DMatrix<f64> = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.5..1.5));
    let y = DMatrix::from_fn(n, 2, |i, j| {
        let base = if j == 0 { (x[(i, 0)] + 0.5 * x[(i, 1)]).sin() } else { x[(i, 2)] * x[(i, 0)] };
        base + 0.05 * normal(&mut rng)
    });
    let hps = vec![
        KernelHyperparams { lengthscales: vec![0.9, 1.4, 2.0], signal_variance: 1.1, noise_variance: 0.01 },
        KernelHyperparams { lengthscales: vec![1.2, 3.0, 0.8], signal_variance: 0.7, noise_variance: 0.02 },
    ];
    GPModel::new(x, y, hps).unwrap()
}

pub struct McReport {
    /// Worst |analytic - MC| / standard error over the output means.
    pub mean_z: f64,
    /// Worst relative error of the output variances.
    pub var_rel: f64,
    /// Worst |analytic - MC| / standard error over the input-output cross-covariances.
    pub cross_z: f64,
}

/// Compare moment matching against sampling `x ~ N(m, S)` and pushing each
/// sample through the pointwise predictor. Output variance is estimated by
/// the law of total variance: Var[mean(x)] + E[var(x)].
pub fn moment_matching_vs_monte_carlo(gp: &GPModel, seed: u64, samples: usize) -> McReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = gp.input_dim();
    let e = gp.output_dim();
    let m = DVector::from_fn(d, |_, _| rng.random_range(-0.8..0.8));
    let a = DMatrix::from_fn(d, d, |_, _| 0.35 * normal(&mut rng));
    let s = &a * a.transpose() + DMatrix::identity(d, d) * 0.01;
    let l = s.clone().cholesky().unwrap().l();
    let mo = gp.predict_uncertain(&m, &s).unwrap();

    let mut sum = DVector::zeros(e);
    let mut sum_sq = DVector::zeros(e);
    let mut sum_var = DVector::zeros(e);
    let mut sum_xy: DMatrix<f64> = DMatrix::zeros(d, e);
    let mut sum_xy_sq: DMatrix<f64> = DMatrix::zeros(d, e);
    let nf = samples as f64;
    for _ in 0..samples {
        let z = DVector::from_fn(d, |_, _| normal(&mut rng));
        let dx = &l * z;
        let x = &m + &dx;
        let (mu, var) = gp.predict(x.as_slice());
        sum += &mu;
        sum_sq += mu.component_mul(&mu);
        sum_var += var;
        for i in 0..d {
            for j in 0..e {
                let p = dx[i] * mu[j];
                sum_xy[(i, j)] += p;
                sum_xy_sq[(i, j)] += p * p;
            }
        }
    }
    let mean = &sum / nf;
    let var_of_mean = (&sum_sq / nf - mean.component_mul(&mean)) * (nf / (nf - 1.0));
    let mut report = McReport { mean_z: 0.0, var_rel: 0.0, cross_z: 0.0 };
    for j in 0..e {
        let se = (var_of_mean[j] / nf).sqrt().max(1e-15);
        report.mean_z = report.mean_z.max((mo.mean[j] - mean[j]).abs() / se);
        let total = var_of_mean[j] + sum_var[j] / nf;
        report.var_rel = report.var_rel.max((mo.cov[(j, j)] - total).abs() / total);
        for i in 0..d {
            // E[dx * mu] estimates Cov[x, f] because E[dx] = 0
            let c = sum_xy[(i, j)] / nf;
            let se = ((sum_xy_sq[(i, j)] / nf - c * c) / nf).sqrt().max(1e-15);
            report.cross_z = report.cross_z.max((mo.cross[(i, j)] - c).abs() / se);
        }
    }
    report
}

/// `n` one-step transitions of the true plant from states drawn around the
/// origin with per-state standard deviation `state_std` and uniform controls.
pub fn plant_transitions(
    seed: u64,
    n: usize,
    state_std: [f64; 4],
    params: &kldpid::plant::PlantParams,
    control: impl Fn(&kldpid::plant::PlantState, &mut ChaCha8Rng) -> f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    use kldpid::plant::{draw_noise, step, PlantState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 5);
    let mut y = DMatrix::zeros(n, 4);
    for i in 0..n {
        let s = PlantState::from_array(std::array::from_fn(|d| state_std[d] * normal(&mut rng)));
        let u = control(&s, &mut rng);
        let noise = draw_noise(params, &mut rng);
        let next = step(&s, u, params, (0.0, 0.0), &noise).unwrap();
        let (a, b) = (s.to_array(), next.to_array());
        for d in 0..4 {
            x[(i, d)] = a[d];
            y[(i, d)] = b[d] - a[d];
        }
        x[(i, 4)] = u;
    }
    (x, y)
}

/// Relative error (vector norm) between the analytic cost-to-go gradient
/// and central differences of the predicted cost-to-go over every policy
/// parameter.
pub fn policy_gradient_rel_error(
    gp: &GPModel,
    policy: &kldpid::policy_search::PolicyParams,
    cost: &kldpid::policy_search::CostConfig,
) -> f64 {
    use kldpid::policy_search::{predict_rollout, rollout_gradient};
    let (_, g) = rollout_gradient(gp, policy, cost).unwrap();
    let phi = policy.to_flat();
    // the predicted cost carries ~1e-10 absolute rounding from the latent
    // variance term, so a smaller step is noise-dominated
    let h = 1e-4;
    let fd = DVector::from_fn(phi.len(), |k, _| {
        let mut p = phi.clone();
        let mut m = phi.clone();
        p[k] += h;
        m[k] -= h;
        let jp = predict_rollout(gp, &policy.with_flat(&p), cost).unwrap().total_cost;
        let jm = predict_rollout(gp, &policy.with_flat(&m), cost).unwrap().total_cost;
        (jp - jm) / (2.0 * h)
    });
    (&g - &fd).norm() / fd.norm().max(1e-12)
}

/// Random feature matrix with column scales spread over two decades.
pub fn random_dataset(rng: &mut ChaCha8Rng, rows: usize, channels: usize, inputs: usize) -> AugmentedDataset {
    let scales: Vec<f64> = (0..3 * channels).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
    AugmentedDataset {
        features: DMatrix::from_fn(rows, 3 * channels, |_, j| scales[j] * normal(rng)),
        controls: DMatrix::from_fn(rows, inputs, |_, _| 3.0 * normal(rng)),
        channels: (0..channels).collect(),
        sources: vec![],
    }
}

pub fn random_gains(rng: &mut ChaCha8Rng, structure: PidStructure, inputs: usize, channels: usize) -> PidGains {
    let ch: Vec<usize> = (0..channels).collect();
    let mut g = PidGains::random(structure, inputs, &ch, 1.0, rng).unwrap();
    g.sigma = (0..inputs).map(|_| rng.random_range(0.2..3.0)).collect();
    g
}

/// Central differences of the control likelihood over the free gains and,
/// when `learn_sigma`, over log sigma.
pub fn likelihood_numeric_gradient(data: &AugmentedDataset, gains: &PidGains, learn_sigma: bool) -> DVector<f64> {
    let free = gains.free();
    let nk = free.len();
    let n = nk + if learn_sigma { gains.inputs() } else { 0 };
    DVector::from_fn(n, |i, _| {
        let eval = |delta: f64| {
            let mut g = gains.clone();
            if i < nk {
                let mut f = free.clone();
                f[i] += delta;
                g = g.with_free(&f);
            } else {
                let s = &mut g.sigma[i - nk];
                *s = (s.ln() + delta).exp();
            }
            pid_nll(data, &g).unwrap()
        };
        // the objective is quadratic in K, so central differences are exact
        // there up to rounding; log-sigma uses a smaller step
        let h = if i < nk { 1e-3 } else { 1e-5 };
        (eval(h) - eval(-h)) / (2.0 * h)
    })
}

/// Relative error of the analytic likelihood gradient on one random
/// instance; the structure, sizes and sigma handling vary with the seed.
pub fn likelihood_gradient_rel_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = rng.random_range(1..4);
    let (structure, inputs) =
        if rng.random::<bool>() { (PidStructure::Coupled, rng.random_range(1..3)) } else { (PidStructure::Decoupled, channels) };
    let rows = rng.random_range(5..80);
    let data = random_dataset(&mut rng, rows, channels, inputs);
    let gains = random_gains(&mut rng, structure, inputs, channels);
    let learn_sigma = rng.random::<bool>();
    let g = pid_nll_gradient(&data, &gains, learn_sigma).unwrap();
    let fd = likelihood_numeric_gradient(&data, &gains, learn_sigma);
    (&g - &fd).norm() / fd.norm().max(1e-12)
}

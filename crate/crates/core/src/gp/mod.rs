//! Gaussian-process regression over plant transitions: one independent
//! squared-exponential ARD GP per output dimension, evidence maximization
//! in log-space, and prediction at deterministic or Gaussian inputs.

pub mod moments;

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_jittered};
use crate::optim::{minimize, FnObjective, MinimizeConfig};
use crate::plant::{PlantState, STATE_DIM};

pub use moments::{BasisExpansion, BasisHead, ExpansionGradient, Moments};

/// Log-hyperparameters outside this box are treated as infeasible.
const LOG_BOUND: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self { lengthscales: vec![lengthscale; dim], signal_variance, noise_variance }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.is_empty()
            || !self.lengthscales.iter().all(|&l| ok(l))
            || !ok(self.signal_variance)
            || !ok(self.noise_variance)
        {
            return Err(Error::Config(format!("kernel hyperparameters must be positive and finite: {self:?}")));
        }
        Ok(())
    }

    /// `[log l_1 .. log l_D, log sf2, log sn2]`.
    pub fn to_log(&self) -> DVector<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        DVector::from_vec(v)
    }

    pub fn from_log(v: &DVector<f64>) -> Self {
        let d = v.len() - 2;
        Self {
            lengthscales: v.rows(0, d).iter().map(|x| x.exp()).collect(),
            signal_variance: v[d].exp(),
            noise_variance: v[d + 1].exp(),
        }
    }

    pub fn inv_lengthsq(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.lengthscales.iter().map(|l| 1.0 / (l * l)))
    }
}

/// Squared-exponential ARD covariance between two inputs.
pub fn kernel_eval(hp: &KernelHyperparams, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "kernel inputs differ in dimension");
    assert_eq!(a.len(), hp.dim(), "kernel inputs do not match the lengthscales");
    let r2: f64 = a.iter().zip(b).zip(&hp.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    hp.signal_variance * (-0.5 * r2).exp()
}

/// Noise-free kernel matrix over the rows of `x`.
pub fn kernel_matrix(hp: &KernelHyperparams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let il = hp.inv_lengthsq();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let r2: f64 = (0..x.ncols()).map(|d| (x[(i, d)] - x[(j, d)]).powi(2) * il[d]).sum();
            let v = hp.signal_variance * (-0.5 * r2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Log marginal likelihood of one head and its gradient with respect to
/// the log-hyperparameters.
pub fn head_log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hp: &KernelHyperparams,
) -> Result<(f64, DVector<f64>)> {
    let n = x.nrows();
    let dim = x.ncols();
    let kf = kernel_matrix(hp, x);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hp.noise_variance;
    }
    let (ch, _) = cholesky_jittered(&k)?;
    let alpha = ch.solve(y);
    let value = -0.5 * y.dot(&alpha) - 0.5 * chol_logdet(&ch) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dL/dtheta = 1/2 tr((aa^T - K^-1) dK/dtheta)
    let mut w = &alpha * alpha.transpose() - ch.inverse();
    let noise_term = 0.5 * hp.noise_variance * w.trace();
    w.component_mul_assign(&kf);
    let mut grad = DVector::zeros(dim + 2);
    let row_sums = DVector::from_iterator(n, w.row_iter().map(|r| r.sum()));
    for d in 0..dim {
        let xd = x.column(d);
        let sq: f64 = (0..n).map(|i| xd[i] * xd[i] * row_sums[i]).sum();
        let cross = xd.dot(&(&w * xd));
        grad[d] = (sq - cross) / (hp.lengthscales[d] * hp.lengthscales[d]);
    }
    grad[dim] = 0.5 * w.sum();
    grad[dim + 1] = noise_term;
    Ok((value, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    /// Larger training sets are subsampled uniformly to this many points.
    pub max_points: usize,
    pub optimizer: MinimizeConfig,
    /// Standard deviation of the log-space perturbation applied to restarts.
    pub restart_spread: f64,
    /// Soft cap on the signal-to-noise ratio (standard deviations). Nearly
    /// noise-free fits make `K` so ill-conditioned that the latent variance
    /// term of moment matching loses all precision.
    pub max_snr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_points: 400,
            optimizer: MinimizeConfig { max_iters: 100, grad_tol: 1e-5, max_step: 3.0, ..Default::default() },
            restart_spread: 0.5,
            max_snr: 1000.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    hp: KernelHyperparams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    k_inv: DMatrix<f64>,
}

/// Fitted multi-output GP. Immutable once built.
#[derive(Debug, Clone)]
pub struct GPModel {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    heads: Vec<Head>,
}

/// Serialized form of a [`GPModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub hyperparams: Vec<KernelHyperparams>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged rows".into()));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

fn default_hyperparams(x: &DMatrix<f64>, y: &DVector<f64>) -> KernelHyperparams {
    let n = x.nrows() as f64;
    let std = |it: Vec<f64>| {
        let mean = it.iter().sum::<f64>() / n;
        (it.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let lengthscales = x
        .column_iter()
        .map(|c| {
            let s = std(c.iter().copied().collect());
            if s > 1e-8 { s } else { 1.0 }
        })
        .collect();
    let sy = std(y.iter().copied().collect());
    let var = if sy > 1e-8 { sy * sy } else { 1e-4 };
    KernelHyperparams { lengthscales, signal_variance: var, noise_variance: 0.01 * var }
}

fn fit_head(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &FitConfig,
    seed: u64,
    warm: Option<&KernelHyperparams>,
) -> Result<KernelHyperparams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = match warm {
        Some(hp) if hp.dim() == x.ncols() && hp.validate().is_ok() => hp.to_log(),
        _ => default_hyperparams(x, y).to_log(),
    };
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut failures = Vec::new();
    for r in 0..cfg.restarts.max(1) {
        let start = if r == 0 {
            base.clone()
        } else {
            base.map(|v| v + cfg.restart_spread * { let z: f64 = StandardNormal.sample(&mut rng); z })
        };
        let mut obj = FnObjective(|theta: &DVector<f64>| {
            if theta.iter().any(|v| v.abs() > LOG_BOUND) {
                return Err(Error::Domain("hyperparameters out of range".into()));
            }
            let (v, mut g) = head_log_marginal_likelihood(x, y, &KernelHyperparams::from_log(theta))?;
            g = -g;
            // barrier ((log sf - log sn) / log max_snr)^30
            let d = theta.len() - 2;
            let scale = cfg.max_snr.ln();
            let r = 0.5 * (theta[d] - theta[d + 1]) / scale;
            let dr = 30.0 * r.powi(29) * 0.5 / scale;
            g[d] += dr;
            g[d + 1] -= dr;
            Ok((-v + r.powi(30), g))
        });
        match minimize(&mut obj, start, &cfg.optimizer) {
            Ok(res) => {
                log::debug!("gp restart {r}: -lml {:.4} after {} iterations", res.value, res.iterations);
                if best.as_ref().is_none_or(|(v, _)| res.value < *v) {
                    best = Some((res.value, res.x));
                }
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    best.map(|(_, t)| KernelHyperparams::from_log(&t))
        .ok_or_else(|| Error::FitFailed(failures.join("; ")))
}

impl GPModel {
    /// Build a model with given hyperparameters (one set per target column).
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, hyperparams: Vec<KernelHyperparams>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::EmptyData("GP needs at least one training point".into()));
        }
        if targets.nrows() != n || hyperparams.len() != targets.ncols() {
            return Err(Error::Shape(format!(
                "{n} inputs, {} targets, {} outputs, {} hyperparameter sets",
                targets.nrows(),
                targets.ncols(),
                hyperparams.len()
            )));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(Error::DataQuality("non-finite training data".into()));
        }
        let heads = hyperparams
            .into_iter()
            .enumerate()
            .map(|(a, hp)| {
                hp.validate()?;
                if hp.dim() != inputs.ncols() {
                    return Err(Error::Shape("lengthscales do not match the input dimension".into()));
                }
                let mut k = kernel_matrix(&hp, &inputs);
                for i in 0..n {
                    k[(i, i)] += hp.noise_variance;
                }
                let (chol, _) = cholesky_jittered(&k)?;
                let alpha = chol.solve(&targets.column(a).into_owned());
                let k_inv = chol.inverse();
                Ok(Head { hp, chol, alpha, k_inv })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, targets, heads })
    }

    /// Fit hyperparameters per head by evidence maximization with restarts.
    /// Deterministic given `seed`.
    pub fn fit(inputs: &DMatrix<f64>, targets: &DMatrix<f64>, cfg: &FitConfig, seed: u64) -> Result<Self> {
        Self::fit_from(inputs, targets, cfg, seed, None)
    }

    /// Like [`fit`](Self::fit), but the first restart of each head starts
    /// from `warm` instead of the data-driven default.
    pub fn fit_from(
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        cfg: &FitConfig,
        seed: u64,
        warm: Option<&[KernelHyperparams]>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if n < 2 {
            return Err(Error::EmptyData(format!("GP fit needs at least 2 points, got {n}")));
        }
        if targets.nrows() != n {
            return Err(Error::Shape(format!("{n} inputs but {} targets", targets.nrows())));
        }
        let (x, y) = if n > cfg.max_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_d47a);
            let mut idx = sample(&mut rng, n, cfg.max_points).into_vec();
            idx.sort_unstable();
            (inputs.select_rows(&idx), targets.select_rows(&idx))
        } else {
            (inputs.clone(), targets.clone())
        };
        let hps = (0..y.ncols())
            .into_par_iter()
            .map(|a| {
                let w = warm.and_then(|w| w.get(a));
                fit_head(&x, &y.column(a).into_owned(), cfg, seed.wrapping_add(a as u64), w)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(x, y, hps)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.heads.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn hyperparams(&self) -> Vec<KernelHyperparams> {
        self.heads.iter().map(|h| h.hp.clone()).collect()
    }

    /// Summed evidence over heads and the concatenated log-hyperparameter gradient.
    pub fn log_marginal_likelihood(&self) -> Result<(f64, DVector<f64>)> {
        let mut total = 0.0;
        let mut grads = Vec::new();
        for (a, h) in self.heads.iter().enumerate() {
            let (v, g) = head_log_marginal_likelihood(&self.inputs, &self.targets.column(a).into_owned(), &h.hp)?;
            total += v;
            grads.extend(g.iter().copied());
        }
        Ok((total, DVector::from_vec(grads)))
    }

    /// Posterior mean and variance (including observation noise) per head.
    pub fn predict(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        assert_eq!(x.len(), self.input_dim(), "query dimension");
        let e = self.output_dim();
        let mut mean = DVector::zeros(e);
        let mut var = DVector::zeros(e);
        for (a, h) in self.heads.iter().enumerate() {
            let k = DVector::from_iterator(
                self.len(),
                self.inputs.row_iter().map(|r| kernel_eval(&h.hp, r.transpose().as_slice(), x)),
            );
            mean[a] = k.dot(&h.alpha);
            let v = h.chol.l_dirty().solve_lower_triangular(&k).expect("cholesky factor is non-singular");
            var[a] = (h.hp.signal_variance - v.norm_squared()).max(0.0) + h.hp.noise_variance;
        }
        (mean, var)
    }

    /// Next-state prediction for a model trained on `(state, u) -> delta`.
    pub fn predict_next_state(&self, state: &PlantState, u: f64) -> Result<(PlantState, [f64; STATE_DIM])> {
        if self.input_dim() != STATE_DIM + 1 || self.output_dim() != STATE_DIM {
            return Err(Error::Shape("model is not a (state, control) -> state-difference model".into()));
        }
        let s = state.to_array();
        let x = [s[0], s[1], s[2], s[3], u];
        let (m, v) = self.predict(&x);
        let next = PlantState::from_array(std::array::from_fn(|i| s[i] + m[i]));
        Ok((next, std::array::from_fn(|i| v[i])))
    }

    /// Borrowed view of the posterior means as basis expansions.
    pub fn expansion(&self) -> BasisExpansion<'_> {
        BasisExpansion {
            centers: &self.inputs,
            heads: self
                .heads
                .iter()
                .map(|h| BasisHead {
                    beta: &h.alpha,
                    inv_lengthsq: h.hp.inv_lengthsq(),
                    signal_variance: h.hp.signal_variance,
                    latent: Some((&h.k_inv, h.hp.noise_variance)),
                })
                .collect(),
        }
    }

    /// Exact moment matching for a Gaussian input `N(mean, cov)`.
    pub fn predict_uncertain(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Moments> {
        self.expansion().moments(mean, cov)
    }

    pub fn checkpoint(&self) -> GpCheckpoint {
        GpCheckpoint { inputs: rows_of(&self.inputs), targets: rows_of(&self.targets), hyperparams: self.hyperparams() }
    }

    pub fn from_checkpoint(c: &GpCheckpoint) -> Result<Self> {
        Self::new(matrix_from_rows(&c.inputs)?, matrix_from_rows(&c.targets)?, c.hyperparams.clone())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.checkpoint())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

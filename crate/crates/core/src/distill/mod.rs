//! PID distillation: fit a Gaussian linear-in-error-features policy to expert
//! data by minimizing the forward KL divergence, which reduces to maximum
//! likelihood of the expert controls.

pub mod expert;
pub mod kde;
pub mod pid;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentedDataset, STATE_NAMES};
use crate::error::{Error, Result};
use crate::optim::{minimize, FnObjective, Method, MinimizeConfig, Termination};

pub use expert::{collect_expert_data, ExpertConfig, ExpertData};
pub use kde::{
    compare_joint_pdfs, kde_joint, kld_discrete, row_states, silverman_bandwidth, Bandwidth, DensityGrid, GridSpec,
    JointPdfs,
};
pub use pid::{pid_control, pid_features, PidController, PidState};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Which entries of the gain matrix are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PidStructure {
    /// Every input sees every error feature.
    Coupled,
    /// Input `k` sees only the P, I and D features of channel `k`.
    Decoupled,
}

impl PidStructure {
    /// `inputs x 3C` mask of free entries.
    pub fn mask(self, inputs: usize, channels: usize) -> Result<DMatrix<bool>> {
        if inputs == 0 || channels == 0 {
            return Err(Error::Shape("gain matrix needs at least one input and one channel".into()));
        }
        match self {
            PidStructure::Coupled => Ok(DMatrix::from_element(inputs, 3 * channels, true)),
            PidStructure::Decoupled => {
                if inputs != channels {
                    return Err(Error::Shape(format!(
                        "decoupled gains pair each input with one channel; got {inputs} inputs for {channels} channels"
                    )));
                }
                Ok(DMatrix::from_fn(inputs, 3 * channels, |k, j| j % channels == k))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GainsFile {
    structure: PidStructure,
    channels: Vec<usize>,
    rows: usize,
    cols: usize,
    /// Row-major.
    k: Vec<f64>,
    sigma: Vec<f64>,
    #[serde(default = "yes")]
    integral: bool,
    features: String,
}

fn yes() -> bool {
    true
}

/// Gain matrix `K` (`inputs x 3C`, columns `[e.., i.., d..]`) and the
/// per-input standard deviation of the Gaussian policy around `K e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainsFile", into = "GainsFile")]
pub struct PidGains {
    pub structure: PidStructure,
    /// State indices of the feedback channels.
    pub channels: Vec<usize>,
    pub k: DMatrix<f64>,
    pub sigma: Vec<f64>,
    /// When false the integral block is structurally zero (PD control).
    pub integral: bool,
}

fn feature_names(channels: &[usize]) -> String {
    let mut names = Vec::new();
    for prefix in ["e", "i", "d"] {
        for &c in channels {
            names.push(format!("{prefix}_{}", STATE_NAMES.get(c).copied().unwrap_or("?")));
        }
    }
    names.join(",")
}

impl TryFrom<GainsFile> for PidGains {
    type Error = Error;

    fn try_from(f: GainsFile) -> Result<Self> {
        if f.k.len() != f.rows * f.cols {
            return Err(Error::Shape(format!("{} gain entries for a {}x{} matrix", f.k.len(), f.rows, f.cols)));
        }
        if f.features != feature_names(&f.channels) {
            return Err(Error::Config(format!(
                "feature order '{}' does not match channels {:?}",
                f.features, f.channels
            )));
        }
        let g = PidGains {
            structure: f.structure,
            channels: f.channels,
            k: DMatrix::from_row_slice(f.rows, f.cols, &f.k),
            sigma: f.sigma,
            integral: f.integral,
        };
        g.validate()?;
        Ok(g)
    }
}

impl From<PidGains> for GainsFile {
    fn from(g: PidGains) -> Self {
        GainsFile {
            structure: g.structure,
            features: feature_names(&g.channels),
            channels: g.channels,
            rows: g.k.nrows(),
            cols: g.k.ncols(),
            k: g.k.transpose().iter().copied().collect(),
            sigma: g.sigma,
            integral: g.integral,
        }
    }
}

impl PidGains {
    pub fn zeros(structure: PidStructure, inputs: usize, channels: &[usize], sigma: f64) -> Result<Self> {
        structure.mask(inputs, channels.len())?;
        let g = Self {
            structure,
            channels: channels.to_vec(),
            k: DMatrix::zeros(inputs, 3 * channels.len()),
            sigma: vec![sigma; inputs],
            integral: true,
        };
        g.validate()?;
        Ok(g)
    }

    /// Free entries drawn from `N(0, 1)`.
    pub fn random<R: Rng + ?Sized>(
        structure: PidStructure,
        inputs: usize,
        channels: &[usize],
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let g = Self::zeros(structure, inputs, channels, sigma)?;
        let n = g.free_count();
        Ok(g.with_free(&DVector::from_fn(n, |_, _| StandardNormal.sample(rng))))
    }

    pub fn inputs(&self) -> usize {
        self.k.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn mask(&self) -> DMatrix<bool> {
        layout_mask(self.structure, self.integral, self.inputs(), self.channels.len()).expect("validated shape")
    }

    pub fn free_count(&self) -> usize {
        self.mask().iter().filter(|&&b| b).count()
    }

    pub fn validate(&self) -> Result<()> {
        let mask = layout_mask(self.structure, self.integral, self.inputs(), self.channels.len())?;
        if self.k.ncols() != 3 * self.channels.len() {
            return Err(Error::Shape(format!(
                "{} gain columns for {} channels",
                self.k.ncols(),
                self.channels.len()
            )));
        }
        if self.sigma.len() != self.inputs() {
            return Err(Error::Shape(format!("{} sigmas for {} inputs", self.sigma.len(), self.inputs())));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("policy std must be positive, got {s}")));
        }
        if self.k.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite gain".into()));
        }
        if self.k.iter().zip(mask.iter()).any(|(v, free)| !free && *v != 0.0) {
            return Err(Error::Config("gain set inside the structural zero pattern".into()));
        }
        Ok(())
    }

    /// Free entries in row-major order.
    pub fn free(&self) -> DVector<f64> {
        let mask = self.mask();
        let mut v = Vec::new();
        for r in 0..self.k.nrows() {
            for c in 0..self.k.ncols() {
                if mask[(r, c)] {
                    v.push(self.k[(r, c)]);
                }
            }
        }
        DVector::from_vec(v)
    }

    pub fn with_free(&self, free: &DVector<f64>) -> Self {
        let mask = self.mask();
        let mut out = self.clone();
        let mut i = 0;
        for r in 0..self.k.nrows() {
            for c in 0..self.k.ncols() {
                if mask[(r, c)] {
                    out.k[(r, c)] = free[i];
                    i += 1;
                }
            }
        }
        out
    }

    /// Mean control `K e` (unclamped).
    pub fn mean_control(&self, features: &[f64]) -> Vec<f64> {
        (0..self.inputs()).map(|r| self.k.row(r).iter().zip(features).map(|(a, b)| a * b).sum()).collect()
    }

    /// Same gains with the integral block zeroed (PD mode).
    pub fn without_integral(&self) -> Self {
        let c = self.channels.len();
        let mut out = self.clone();
        out.k.columns_mut(c, c).fill(0.0);
        out.integral = false;
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Structure mask with the integral block removed when `integral` is false.
pub fn layout_mask(structure: PidStructure, integral: bool, inputs: usize, channels: usize) -> Result<DMatrix<bool>> {
    let mut m = structure.mask(inputs, channels)?;
    if !integral {
        m.columns_mut(channels, channels).fill(false);
    }
    Ok(m)
}

fn check_dims(data: &AugmentedDataset, gains: &PidGains) -> Result<()> {
    gains.validate()?;
    if data.feature_dim() != gains.feature_dim() || data.inputs() != gains.inputs() {
        return Err(Error::Shape(format!(
            "dataset is {}x({} features, {} inputs), gains expect {} features and {} inputs",
            data.rows(),
            data.feature_dim(),
            data.inputs(),
            gains.feature_dim(),
            gains.inputs()
        )));
    }
    Ok(())
}

/// `U - F K^T`.
fn residuals(data: &AugmentedDataset, k: &DMatrix<f64>) -> DMatrix<f64> {
    &data.controls - &data.features * k.transpose()
}

/// Negative log-likelihood of the expert controls under `N(K e, sigma^2)`.
pub fn pid_nll(data: &AugmentedDataset, gains: &PidGains) -> Result<f64> {
    check_dims(data, gains)?;
    let r = residuals(data, &gains.k);
    let n = data.rows() as f64;
    Ok(gains
        .sigma
        .iter()
        .enumerate()
        .map(|(i, s)| n * (HALF_LN_2PI + s.ln()) + r.column(i).norm_squared() / (2.0 * s * s))
        .sum())
}

/// Gradient of [`pid_nll`] over the free gain entries (row-major), followed
/// by one entry per input for `log sigma` when `learn_sigma` is set.
pub fn pid_nll_gradient(data: &AugmentedDataset, gains: &PidGains, learn_sigma: bool) -> Result<DVector<f64>> {
    check_dims(data, gains)?;
    Ok(nll_and_gradient(data, gains, learn_sigma).1)
}

fn nll_and_gradient(data: &AugmentedDataset, gains: &PidGains, learn_sigma: bool) -> (f64, DVector<f64>) {
    let r = residuals(data, &gains.k);
    let n = data.rows() as f64;
    let mut value = 0.0;
    let mut gk = DMatrix::zeros(gains.inputs(), gains.feature_dim());
    let mut gs = Vec::with_capacity(gains.inputs());
    for (i, s) in gains.sigma.iter().enumerate() {
        let s2 = s * s;
        let rss = r.column(i).norm_squared();
        value += n * (HALF_LN_2PI + s.ln()) + rss / (2.0 * s2);
        let row = -(data.features.transpose() * r.column(i)) / s2;
        gk.row_mut(i).copy_from(&row.transpose());
        gs.push(n - rss / s2);
    }
    let mut g = gains.with_k_unchecked(gk).free().as_slice().to_vec();
    if learn_sigma {
        g.extend(gs);
    }
    (value, DVector::from_vec(g))
}

impl PidGains {
    fn with_k_unchecked(&self, k: DMatrix<f64>) -> Self {
        Self { k, ..self.clone() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Stop once an iteration lowers the objective by less than this.
    pub epsilon: f64,
    pub max_iters: usize,
    pub method: Method,
    /// Optimize `log sigma` jointly with the gains.
    pub learn_sigma: bool,
    /// Fixed policy std as a fraction of `u_max` while `sigma` is not learned.
    pub sigma_fraction: f64,
    /// Replace `sigma` by the residual MLE after a fixed-sigma fit.
    pub refit_sigma: bool,
    /// Rescale gain coordinates by the RMS of their feature column.
    pub precondition: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            max_iters: 2000,
            method: Method::Lbfgs,
            learn_sigma: false,
            sigma_fraction: 0.1,
            refit_sigma: true,
            precondition: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.sigma_fraction > 0.0) {
            return Err(Error::Config(format!("sigma_fraction must be positive, got {}", self.sigma_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct KldFit {
    pub gains: PidGains,
    /// Objective at the start and after every accepted iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl KldFit {
    /// Stopped on the decrease or gradient test rather than the iteration cap.
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

/// Residual MLE of the policy std per input.
pub fn residual_sigma(data: &AugmentedDataset, k: &DMatrix<f64>) -> Vec<f64> {
    let r = residuals(data, k);
    let n = data.rows().max(1) as f64;
    r.column_iter().map(|c| (c.norm_squared() / n).sqrt().max(1e-12)).collect()
}

/// Minimize the expert-control negative log-likelihood from `gains0`.
pub fn minimize_kld(data: &AugmentedDataset, gains0: &PidGains, cfg: &DistillConfig) -> Result<KldFit> {
    cfg.validate()?;
    check_dims(data, gains0)?;
    if data.rows() == 0 {
        return Err(Error::EmptyData("no expert rows to distill".into()));
    }
    // per free entry, the RMS of the feature it multiplies
    let mask = gains0.mask();
    let mut scale = Vec::new();
    for r in 0..mask.nrows() {
        for c in 0..mask.ncols() {
            if mask[(r, c)] {
                let rms = (data.features.column(c).norm_squared() / data.rows() as f64).sqrt();
                scale.push(if cfg.precondition && rms > 0.0 && rms.is_finite() { rms } else { 1.0 });
            }
        }
    }
    let nk = scale.len();
    let inputs = gains0.inputs();
    let unpack = |z: &DVector<f64>| -> PidGains {
        let free = DVector::from_fn(nk, |i, _| z[i] / scale[i]);
        let mut g = gains0.with_free(&free);
        if cfg.learn_sigma {
            g.sigma = (0..inputs).map(|i| z[nk + i].exp()).collect();
        }
        g
    };
    let mut z0: Vec<f64> = gains0.free().iter().zip(&scale).map(|(k, s)| k * s).collect();
    if cfg.learn_sigma {
        z0.extend(gains0.sigma.iter().map(|s| s.ln()));
    }
    let mut objective = FnObjective(|z: &DVector<f64>| {
        let g = unpack(z);
        let (v, mut grad) = nll_and_gradient(data, &g, cfg.learn_sigma);
        for (gi, s) in grad.iter_mut().zip(&scale) {
            *gi /= s;
        }
        if !v.is_finite() {
            return Err(Error::DataQuality("distillation objective is not finite".into()));
        }
        Ok((v, grad))
    });
    let opt = MinimizeConfig {
        method: cfg.method,
        max_iters: cfg.max_iters,
        grad_tol: 1e-14,
        ftol: cfg.epsilon,
        max_backtracks: 60,
        ..Default::default()
    };
    let res = minimize(&mut objective, DVector::from_vec(z0), &opt).map_err(|e| match e {
        Error::Domain(m) => Error::DataQuality(m),
        e => e,
    })?;
    let mut gains = unpack(&res.x);
    if cfg.refit_sigma && !cfg.learn_sigma {
        gains.sigma = residual_sigma(data, &gains.k);
    }
    Ok(KldFit { gains, trace: res.trace, iterations: res.iterations, termination: res.termination })
}

/// Least-squares gains per input restricted to the structure's free entries,
/// with `sigma` set to the residual RMS. This is the exact minimizer of
/// [`pid_nll`] for fixed `sigma`.
pub fn closed_form_gains(data: &AugmentedDataset, structure: PidStructure) -> Result<PidGains> {
    closed_form_gains_with(data, structure, true)
}

/// [`closed_form_gains`] with the integral block optionally held at zero.
pub fn closed_form_gains_with(data: &AugmentedDataset, structure: PidStructure, integral: bool) -> Result<PidGains> {
    data.validate()?;
    if data.rows() == 0 {
        return Err(Error::EmptyData("no expert rows to fit".into()));
    }
    let mask = layout_mask(structure, integral, data.inputs(), data.channels.len())?;
    let mut k = DMatrix::zeros(data.inputs(), data.feature_dim());
    for i in 0..data.inputs() {
        let cols: Vec<usize> = (0..mask.ncols()).filter(|&c| mask[(i, c)]).collect();
        let a = data.features.select_columns(&cols);
        let b = data.controls.column(i).into_owned();
        let x = least_squares(&a, &b)?;
        for (j, &c) in cols.iter().enumerate() {
            k[(i, c)] = x[j];
        }
    }
    let sigma = residual_sigma(data, &k);
    let g = PidGains { structure, channels: data.channels.clone(), k, sigma, integral };
    g.validate()?;
    Ok(g)
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax > 0.0 && smin > 1e-12 * smax && a.nrows() >= a.ncols() {
        let x = svd.solve(b, 0.0).map_err(|e| Error::Conditioning(e.into()))?;
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    log::warn!("feature matrix is rank deficient; using a ridge-regularized fit");
    let ata = a.transpose() * a;
    let lambda = 1e-8 * (ata.trace() / ata.nrows() as f64).max(1.0);
    let reg = &ata + DMatrix::identity(ata.nrows(), ata.ncols()) * lambda;
    let x = reg
        .cholesky()
        .ok_or_else(|| Error::Conditioning("ridge-regularized normal equations are not positive definite".into()))?
        .solve(&(a.transpose() * b));
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Conditioning("least-squares gains are not finite".into()))
    }
}

//! Expert dataset from rollouts of the learned policy.

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, AugmentedDataset, CART_POLE_CHANNELS};
use crate::error::{Error, Result};
use crate::plant::{rollout, sample_params_with, ParamVariance, PlantParams, PlantState, Trajectory};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub n_rollouts: usize,
    pub horizon: usize,
    /// Initial states are drawn independently per component.
    pub init_mean: PlantState,
    pub init_std: [f64; 4],
    pub randomize_params: bool,
    pub param_var: ParamVariance,
    pub x_des: PlantState,
    pub channels: Vec<usize>,
    /// A rollout whose pole angle ever exceeds this (rad) has lost the pole
    /// and is dropped like a numerically diverged one.
    pub max_abs_theta: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 20,
            horizon: 100,
            init_mean: PlantState::zeros(),
            init_std: [0.05; 4],
            randomize_params: true,
            param_var: ParamVariance::default(),
            x_des: PlantState::zeros(),
            channels: CART_POLE_CHANNELS.to_vec(),
            max_abs_theta: 1.0,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 || self.horizon == 0 {
            return Err(Error::Config("expert data needs at least one rollout of at least one step".into()));
        }
        if !(self.max_abs_theta > 0.0) {
            return Err(Error::Config(format!("max_abs_theta must be positive, got {}", self.max_abs_theta)));
        }
        if self.init_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!("initial-state std must be non-negative: {:?}", self.init_std)));
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> PlantState {
        let z = Vector4::from_fn(|i, _| {
            let n: f64 = StandardNormal.sample(rng);
            self.init_std[i] * n
        });
        PlantState::from_vector(&(self.init_mean.to_vector() + z))
    }
}

#[derive(Debug, Clone)]
pub struct ExpertData {
    pub dataset: AugmentedDataset,
    pub trajectories: Vec<Trajectory>,
    /// Rollouts dropped because they diverged.
    pub dropped: usize,
}

/// Roll out `policy` from varied initial states on parameter-randomized
/// plants and build the augmented dataset from the rollouts that kept the
/// pole up.
pub fn collect_expert_data<F>(plant: &PlantParams, policy: F, cfg: &ExpertConfig, seed: u64) -> Result<ExpertData>
where
    F: Fn(&PlantState) -> f64,
{
    cfg.validate()?;
    plant.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(cfg.n_rollouts);
    let mut dropped = 0;
    for _ in 0..cfg.n_rollouts {
        let params = if cfg.randomize_params { sample_params_with(plant, &cfg.param_var, &mut rng)? } else { plant.clone() };
        let x0 = cfg.sample_initial(&mut rng);
        match rollout(&policy, x0, cfg.horizon, &params, None, rng.random()) {
            Ok(t) if t.states.iter().all(|s| s.theta.abs() <= cfg.max_abs_theta) => trajectories.push(t),
            Ok(_) => dropped += 1,
            Err(Error::Divergence { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} of {} expert rollouts diverged or lost the pole and were dropped", cfg.n_rollouts);
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyData("every expert rollout diverged or lost the pole".into()));
    }
    let dataset = augment(&trajectories, &cfg.x_des, &cfg.channels, plant.dt)?;
    Ok(ExpertData { dataset, trajectories, dropped })
}

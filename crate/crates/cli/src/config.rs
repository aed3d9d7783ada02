//! The experiment manifest: one TOML file holding every setting of every
//! command. Missing keys take their defaults.

use std::path::{Path, PathBuf};

use kldpid::distill::{DistillConfig, ExpertConfig, PidStructure};
use kldpid::plant::{Disturbance, DisturbanceChannel, PlantParams, PlantState};
use kldpid::policy_search::{CostConfig, LoopConfig};
use kldpid::roa::RoaConfig;
use kldpid::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Every command writes below `<out_dir>/<command>/`.
    pub out_dir: PathBuf,
    pub plant: PlantParams,
    pub cost: CostConfig,
    pub pilco: LoopConfig,
    pub policy_check: PolicyCheckConfig,
    pub expert: ExpertConfig,
    pub distill: DistillSettings,
    pub roa: RoaConfig,
    pub evaluate: EvaluateConfig,
    pub simulate: SimulateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            plant: PlantParams::default(),
            cost: CostConfig::default(),
            pilco: LoopConfig::default(),
            policy_check: PolicyCheckConfig::default(),
            expert: ExpertConfig::default(),
            distill: DistillSettings::default(),
            roa: RoaConfig::default(),
            evaluate: EvaluateConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.cost.validate()?;
        self.expert.validate()?;
        self.distill.fit.validate()?;
        self.roa.validate()?;
        self.policy_check.validate()?;
        self.evaluate.validate(self.plant.dt)?;
        self.simulate.validate(self.plant.dt)?;
        if !(self.distill.init_std > 0.0) || self.distill.kde_cells < 2 {
            return Err(Error::Config("distill.init_std must be positive and kde_cells at least 2".into()));
        }
        Ok(())
    }

    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.out_dir.join(command)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSettings {
    pub structure: PidStructure,
    /// Fit the PD layout: the integral gains are structural zeros.
    pub zero_integral: bool,
    /// Standard deviation of the random initial gains.
    pub init_std: f64,
    /// Cells per axis of the joint-density grids.
    pub kde_cells: usize,
    pub fit: DistillConfig,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            structure: PidStructure::Coupled,
            zero_integral: false,
            init_std: 1.0,
            kde_cells: 64,
            fit: DistillConfig::default(),
        }
    }
}

/// Noisy test rollouts of a learned policy: the pole counts as held when
/// `|theta| < theta_tol` over the final `tail` seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyCheckConfig {
    pub trials: usize,
    pub duration: f64,
    pub tail: f64,
    pub theta_tol: f64,
}

impl Default for PolicyCheckConfig {
    fn default() -> Self {
        Self { trials: 20, duration: 5.0, tail: 2.0, theta_tol: 0.1 }
    }
}

impl PolicyCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || !(self.duration > 0.0 && self.tail > 0.0 && self.tail <= self.duration) {
            return Err(Error::Config(format!("invalid policy check {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    /// Rollout length in seconds.
    pub duration: f64,
    /// Initial pole angle of the nominal and sweep scenarios.
    pub theta0: f64,
    /// Distance to the target counted as settled.
    pub tolerance: f64,
    /// A run converged when it stays within `tolerance` over this final span (s).
    pub tail: f64,
    /// A run recovered when it settles within this many seconds of the event.
    pub recovery_window: f64,
    /// Add process noise to the evaluation rollouts.
    pub noise: bool,
    pub anti_windup: bool,
    pub matched: Disturbance,
    pub unmatched: Disturbance,
    /// `(pendulum_mass, pole_length)` pairs.
    pub param_sweep: Vec<(f64, f64)>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            theta0: 0.1,
            tolerance: 0.05,
            tail: 1.0,
            recovery_window: 5.0,
            noise: false,
            anti_windup: false,
            matched: Disturbance::impulse(DisturbanceChannel::Matched, 5.0, 2.0),
            unmatched: Disturbance::impulse(DisturbanceChannel::Unmatched, 0.5, 2.0),
            param_sweep: vec![(0.15, 0.5), (0.2, 0.6), (0.3, 0.75)],
        }
    }
}

impl EvaluateConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.duration > 0.0 && self.tolerance > 0.0 && self.tail > 0.0 && self.recovery_window > 0.0) {
            return Err(Error::Config(format!("invalid evaluation settings {self:?}")));
        }
        self.matched.validate(dt)?;
        self.unmatched.validate(dt)?;
        if self.param_sweep.iter().any(|&(m, l)| !(m > 0.0 && l > 0.0)) {
            return Err(Error::Config(format!("sweep pairs must be positive: {:?}", self.param_sweep)));
        }
        Ok(())
    }

    pub fn horizon(&self, dt: f64) -> usize {
        (self.duration / dt).round().max(1.0) as usize
    }
}

/// A single raw rollout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub duration: f64,
    pub initial_state: PlantState,
    pub noise: bool,
    pub disturbance: Option<Disturbance>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { duration: 5.0, initial_state: PlantState::new(0.0, 0.0, 0.1, 0.0), noise: true, disturbance: None }
    }
}

impl SimulateConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.duration > 0.0) || !self.initial_state.is_finite() {
            return Err(Error::Config(format!("invalid simulation settings {self:?}")));
        }
        self.disturbance.as_ref().map_or(Ok(()), |d| d.validate(dt))
    }

    pub fn horizon(&self, dt: f64) -> usize {
        (self.duration / dt).round().max(1.0) as usize
    }
}

//! The outer model-based policy-search loop: roll out, learn a model from
//! all data, improve the policy against the model, repeat.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cost::CostConfig;
use super::optimize::{default_policy_optimizer, optimize_policy};
use super::policy::{PolicyInit, PolicyParams};
use crate::dataset::gp_training_pairs;
use crate::error::{Error, Result};
use crate::gp::{FitConfig, GPModel, KernelHyperparams};
use crate::linalg::cholesky_jittered;
use crate::optim::MinimizeConfig;
use crate::plant::{rollout, sample_params_with, ParamVariance, PlantParams, PlantState, Trajectory, STATE_DIM};

/// A policy-improvement method that can drive [`run_loop`]. The PILCO
/// backend is the only one provided.
pub trait PolicyBackend {
    type Policy: Clone;

    /// Random exploration policy for the first rollout.
    fn initial_policy(&mut self, rng: &mut ChaCha8Rng) -> Result<Self::Policy>;

    fn control(&self, policy: &Self::Policy, state: &PlantState) -> f64;

    /// Learn from all data so far and return an improved policy together
    /// with its predicted cost-to-go.
    fn improve(&mut self, data: &[Trajectory], policy: &Self::Policy, seed: u64) -> Result<(Self::Policy, f64)>;
}

/// GP dynamics model plus RBF policy optimized against the moment-matched
/// cost-to-go.
#[derive(Debug, Clone)]
pub struct PilcoBackend {
    pub cost: CostConfig,
    pub init: PolicyInit,
    pub u_max: f64,
    pub gp: FitConfig,
    pub optimizer: MinimizeConfig,
    /// Hyperparameters of the previous model, used to warm-start the next fit.
    pub warm: Option<Vec<KernelHyperparams>>,
    pub last_model: Option<GPModel>,
}

impl PilcoBackend {
    pub fn new(cost: CostConfig, cfg: &LoopConfig, u_max: f64) -> Self {
        Self {
            cost,
            init: cfg.init.clone(),
            u_max,
            gp: cfg.gp.clone(),
            optimizer: cfg.optimizer.clone(),
            warm: None,
            last_model: None,
        }
    }
}

impl PolicyBackend for PilcoBackend {
    type Policy = PolicyParams;

    fn initial_policy(&mut self, rng: &mut ChaCha8Rng) -> Result<PolicyParams> {
        PolicyParams::random(&self.init, self.u_max, rng)
    }

    fn control(&self, policy: &PolicyParams, state: &PlantState) -> f64 {
        policy.eval(state)
    }

    fn improve(&mut self, data: &[Trajectory], policy: &PolicyParams, seed: u64) -> Result<(PolicyParams, f64)> {
        let (x, y) = gp_training_pairs(data)?;
        let gp = GPModel::fit_from(&x, &y, &self.gp, seed, self.warm.as_deref())?;
        self.warm = Some(gp.hyperparams());
        let res = optimize_policy(&gp, policy, &self.cost, &self.optimizer)?;
        log::info!(
            "policy optimization: J {:.4} -> {:.4} in {} iterations ({:?})",
            res.initial_cost,
            res.final_cost,
            res.iterations,
            res.termination
        );
        self.last_model = Some(gp);
        Ok((res.policy, res.final_cost))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iters: usize,
    /// Stop once the mean realized per-step cost of a rollout drops below this.
    pub task_threshold: f64,
    pub stop_when_learned: bool,
    /// Sample plant parameters for every rollout.
    pub randomize_params: bool,
    pub param_var: ParamVariance,
    /// Extra attempts (fresh noise, fresh initial state) after a diverged rollout.
    pub rollout_retries: usize,
    pub init: PolicyInit,
    pub gp: FitConfig,
    pub optimizer: MinimizeConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_iters: 15,
            task_threshold: 0.2,
            stop_when_learned: true,
            randomize_params: true,
            param_var: ParamVariance::default(),
            rollout_retries: 3,
            init: PolicyInit::default(),
            gp: FitConfig::default(),
            optimizer: default_policy_optimizer(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    /// Absent for the random initial policy.
    pub j_predicted: Option<f64>,
    pub j_realized: f64,
}

pub fn write_log_csv<W: Write>(log: &[IterationLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "J_predicted", "J_realized"])?;
    for e in log {
        w.write_record([
            e.iter.to_string(),
            e.j_predicted.map(|v| v.to_string()).unwrap_or_default(),
            e.j_realized.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct LoopOutcome<P> {
    pub policy: P,
    pub trajectories: Vec<Trajectory>,
    pub log: Vec<IterationLog>,
    pub learned: bool,
    /// Set when the loop stopped early on an error; everything above is
    /// the partial result up to that point.
    pub abort: Option<Error>,
}

/// Realized cost-to-go of a recorded trajectory.
pub fn realized_cost(traj: &Trajectory, cost: &CostConfig) -> f64 {
    traj.states.iter().map(|s| cost.cost(s)).sum()
}

/// Draw an initial state from `N(mu_0, Sigma_0)`.
pub fn sample_initial_state<R: Rng + ?Sized>(cost: &CostConfig, rng: &mut R) -> Result<PlantState> {
    let cov = cost.init_cov_matrix();
    let l = if cov.iter().all(|v| *v == 0.0) {
        DMatrix::zeros(STATE_DIM, STATE_DIM)
    } else {
        cholesky_jittered(&cov)?.0.l()
    };
    let z = DVector::from_fn(STATE_DIM, |_, _| StandardNormal.sample(rng));
    let x = DVector::from_column_slice(&cost.init_mean.to_array()) + l * z;
    Ok(PlantState::from_slice(x.as_slice()))
}

fn collect<B: PolicyBackend>(
    backend: &B,
    policy: &B::Policy,
    plant: &PlantParams,
    cost: &CostConfig,
    cfg: &LoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let mut last = None;
    for _ in 0..=cfg.rollout_retries {
        let params = if cfg.randomize_params { sample_params_with(plant, &cfg.param_var, rng)? } else { plant.clone() };
        let x0 = sample_initial_state(cost, rng)?;
        match rollout(|s| backend.control(policy, s), x0, cost.horizon, &params, None, rng.random()) {
            Ok(t) => return Ok(t),
            Err(e @ Error::Divergence { .. }) => {
                log::warn!("rollout diverged, retrying: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generic data-collection loop over any backend.
pub fn run_loop<B: PolicyBackend>(
    backend: &mut B,
    plant: &PlantParams,
    cost: &CostConfig,
    cfg: &LoopConfig,
    seed: u64,
) -> Result<LoopOutcome<B::Policy>> {
    plant.validate()?;
    cost.validate()?;
    if cost.horizon == 0 {
        return Err(Error::Config("loop horizon must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = backend.initial_policy(&mut rng)?;
    let first = collect(backend, &policy, plant, cost, cfg, &mut rng)?;
    let mut out = LoopOutcome {
        policy: policy.clone(),
        log: vec![IterationLog { iter: 0, j_predicted: None, j_realized: realized_cost(&first, cost) }],
        trajectories: vec![first],
        learned: false,
        abort: None,
    };
    for k in 1..=cfg.max_iters {
        let step_seed: u64 = rng.random();
        let (improved, j_pred) = match backend.improve(&out.trajectories, &policy, step_seed) {
            Ok(v) => v,
            Err(e) => {
                out.abort = Some(e);
                break;
            }
        };
        policy = improved;
        out.policy = policy.clone();
        let traj = match collect(backend, &policy, plant, cost, cfg, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                out.abort = Some(e);
                break;
            }
        };
        let j_real = realized_cost(&traj, cost);
        log::info!("iteration {k}: predicted J {j_pred:.4}, realized J {j_real:.4}");
        out.log.push(IterationLog { iter: k, j_predicted: Some(j_pred), j_realized: j_real });
        out.trajectories.push(traj);
        out.learned = j_real / ((cost.horizon + 1) as f64) < cfg.task_threshold;
        if out.learned && cfg.stop_when_learned {
            break;
        }
    }
    Ok(out)
}

/// Model-based policy search on the cart-pole with the PILCO backend.
pub fn pilco_loop(
    plant: &PlantParams,
    cost: &CostConfig,
    cfg: &LoopConfig,
    seed: u64,
) -> Result<(LoopOutcome<PolicyParams>, PilcoBackend)> {
    let mut backend = PilcoBackend::new(cost.clone(), cfg, plant.u_max);
    let out = run_loop(&mut backend, plant, cost, cfg, seed)?;
    Ok((out, backend))
}

//! Closed-loop scenarios for distilled gains and noisy test rollouts for
//! learned policies.

use clap::ValueEnum;
use kldpid::distill::{PidController, PidGains};
use kldpid::plant::{rollout, Disturbance, PlantParams, PlantState, Trajectory};
use kldpid::policy_search::{sample_initial_state, CostConfig, PolicyParams};
use kldpid::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvaluateConfig, PolicyCheckConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scenario {
    /// Released from a tilted pole with no disturbance.
    Nominal,
    /// Impulse force on the cart.
    Matched,
    /// Impulse torque on the pole.
    Unmatched,
    /// Nominal release on every configured `(m, l)` pair.
    ParamSweep,
    All,
}

impl Scenario {
    pub fn expand(self) -> Vec<Scenario> {
        match self {
            Scenario::All => vec![Scenario::Nominal, Scenario::Matched, Scenario::Unmatched, Scenario::ParamSweep],
            s => vec![s],
        }
    }
}

/// Settling metrics of one rollout, all times in seconds after `event_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetrics {
    pub event_time: f64,
    /// First time from which the distance stays below the tolerance to the
    /// end of the rollout; absent when the final state is outside it.
    pub settling_time: Option<f64>,
    /// Largest distance to the target from the event on.
    pub peak_deviation: f64,
    pub final_distance: f64,
    /// Within the tolerance over the whole final tail.
    pub converged: bool,
    /// Settled within the recovery window.
    pub recovered: bool,
}

/// Metrics of `traj` against `x_des`.
pub fn response_metrics(
    traj: &Trajectory,
    x_des: &PlantState,
    event_time: f64,
    tolerance: f64,
    tail: f64,
    recovery_window: f64,
) -> ResponseMetrics {
    let dist: Vec<f64> = traj.states.iter().map(|s| s.distance(x_des)).collect();
    let end = *traj.times.last().expect("trajectory holds the initial state");
    let first = traj.times.iter().position(|t| *t >= event_time - 1e-9).unwrap_or(dist.len() - 1);
    let peak_deviation = dist[first..].iter().copied().fold(0.0, f64::max);
    let outside = dist.iter().rposition(|d| !(*d < tolerance));
    let settling_time = match outside {
        None => Some(0.0),
        Some(k) if k + 1 < dist.len() => Some((traj.times[k + 1] - event_time).max(0.0)),
        Some(_) => None,
    };
    let tail_start = end - tail;
    let converged = traj.times.iter().zip(&dist).filter(|(t, _)| **t >= tail_start - 1e-9).all(|(_, d)| *d < tolerance);
    ResponseMetrics {
        event_time,
        settling_time,
        peak_deviation,
        final_distance: *dist.last().expect("non-empty"),
        converged,
        recovered: settling_time.is_some_and(|t| t <= recovery_window + 1e-9),
    }
}

/// One evaluated closed-loop run. The schema is the same for every scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    /// Unique per run, used as the trajectory file stem.
    pub name: String,
    pub pendulum_mass: f64,
    pub pole_length: f64,
    pub initial_state: PlantState,
    pub disturbance: Option<Disturbance>,
    /// Step at which the simulation blew up, if it did.
    pub diverged_at: Option<usize>,
    pub metrics: ResponseMetrics,
    #[serde(skip)]
    pub trajectory: Option<Trajectory>,
}

struct Run {
    scenario: Scenario,
    name: String,
    plant: PlantParams,
    x0: PlantState,
    disturbance: Option<Disturbance>,
}

fn runs(plant: &PlantParams, x_des: &PlantState, cfg: &EvaluateConfig, scenario: Scenario) -> Vec<Run> {
    let tilted = PlantState { theta: x_des.theta + cfg.theta0, ..*x_des };
    let mut out = Vec::new();
    for s in scenario.expand() {
        match s {
            Scenario::Nominal => {
                out.push(Run { scenario: s, name: "nominal".into(), plant: plant.clone(), x0: tilted, disturbance: None })
            }
            Scenario::Matched | Scenario::Unmatched => {
                let (name, d) = if s == Scenario::Matched { ("matched", &cfg.matched) } else { ("unmatched", &cfg.unmatched) };
                out.push(Run { scenario: s, name: name.into(), plant: plant.clone(), x0: *x_des, disturbance: Some(d.clone()) })
            }
            Scenario::ParamSweep => {
                for &(m, l) in &cfg.param_sweep {
                    out.push(Run {
                        scenario: s,
                        name: format!("param_sweep_m{m}_l{l}"),
                        plant: PlantParams { pendulum_mass: m, pole_length: l, ..plant.clone() },
                        x0: tilted,
                        disturbance: None,
                    })
                }
            }
            Scenario::All => unreachable!("expanded above"),
        }
    }
    out
}

/// Run the scenario's closed loops in parallel. A diverged simulation is a
/// failed run, not an error.
pub fn evaluate_gains(
    gains: &PidGains,
    plant: &PlantParams,
    x_des: &PlantState,
    cfg: &EvaluateConfig,
    scenario: Scenario,
    seed: u64,
) -> Result<Vec<ScenarioResult>> {
    cfg.validate(plant.dt)?;
    gains.validate()?;
    let horizon = cfg.horizon(plant.dt);
    let list = runs(plant, x_des, cfg, scenario);
    list.into_par_iter()
        .enumerate()
        .map(|(i, run)| {
            let params = if cfg.noise { run.plant.clone() } else { run.plant.noiseless() };
            let mut ctrl = PidController::new(gains.clone(), *x_des, params.dt, params.u_max);
            ctrl.anti_windup = cfg.anti_windup;
            let event_time = run.disturbance.as_ref().map_or(0.0, |d| d.start_time);
            let result = rollout(|s| ctrl.control(s), run.x0, horizon, &params, run.disturbance.as_ref(), seed.wrapping_add(i as u64));
            let (trajectory, diverged_at, metrics) = match result {
                Ok(t) => {
                    let m = response_metrics(&t, x_des, event_time, cfg.tolerance, cfg.tail, cfg.recovery_window);
                    (Some(t), None, m)
                }
                Err(Error::Divergence { step, .. }) => {
                    let m = ResponseMetrics {
                        event_time,
                        settling_time: None,
                        peak_deviation: f64::INFINITY,
                        final_distance: f64::INFINITY,
                        converged: false,
                        recovered: false,
                    };
                    (None, Some(step), m)
                }
                Err(e) => return Err(e),
            };
            Ok(ScenarioResult {
                scenario: run.scenario,
                name: run.name,
                pendulum_mass: params.pendulum_mass,
                pole_length: params.pole_length,
                initial_state: run.x0,
                disturbance: run.disturbance,
                diverged_at,
                metrics,
                trajectory,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheck {
    pub trials: usize,
    pub held: usize,
    /// Largest `|theta|` over the tail of each trial.
    pub tail_max_abs_theta: Vec<f64>,
}

/// Noisy rollouts of `policy` on the nominal plant from initial states drawn
/// from the cost's start distribution.
pub fn check_policy(
    policy: &PolicyParams,
    plant: &PlantParams,
    cost: &CostConfig,
    cfg: &PolicyCheckConfig,
    seed: u64,
) -> Result<PolicyCheck> {
    cfg.validate()?;
    let horizon = (cfg.duration / plant.dt).round() as usize;
    let tail_start = cfg.duration - cfg.tail;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tails = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let x0 = sample_initial_state(cost, &mut rng)?;
        let worst = match rollout(|s| policy.eval(s), x0, horizon, plant, None, rng.random()) {
            Ok(t) => t
                .times
                .iter()
                .zip(&t.states)
                .filter(|(time, _)| **time >= tail_start - 1e-9)
                .map(|(_, s)| s.theta.abs())
                .fold(0.0, f64::max),
            Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        tails.push(worst);
    }
    let held = tails.iter().filter(|v| **v < cfg.theta_tol).count();
    Ok(PolicyCheck { trials: cfg.trials, held, tail_max_abs_theta: tails })
}

//! Gradient-based policy improvement.

use nalgebra::DVector;

use super::cost::CostConfig;
use super::policy::PolicyParams;
use super::rollout::{predict_rollout, rollout_gradient};
use crate::error::Result;
use crate::gp::GPModel;
use crate::optim::{minimize, MinimizeConfig, Objective, Termination};

/// A cost over policies with a gradient in [`PolicyParams::to_flat`] coordinates.
pub trait PolicyObjective {
    fn value(&mut self, policy: &PolicyParams) -> Result<f64>;
    fn value_and_gradient(&mut self, policy: &PolicyParams) -> Result<(f64, DVector<f64>)>;
}

/// The predicted cost-to-go under a learned model.
pub struct RolloutObjective<'a> {
    pub gp: &'a GPModel,
    pub cost: &'a CostConfig,
}

impl PolicyObjective for RolloutObjective<'_> {
    fn value(&mut self, policy: &PolicyParams) -> Result<f64> {
        predict_rollout(self.gp, policy, self.cost).map(|r| r.total_cost)
    }

    fn value_and_gradient(&mut self, policy: &PolicyParams) -> Result<(f64, DVector<f64>)> {
        rollout_gradient(self.gp, policy, self.cost)
    }
}

struct Flat<'a, O: PolicyObjective> {
    template: &'a PolicyParams,
    inner: &'a mut O,
}

impl<O: PolicyObjective> Objective for Flat<'_, O> {
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let p = self.template.with_flat(x);
        p.validate()?;
        self.inner.value_and_gradient(&p)
    }

    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        let p = self.template.with_flat(x);
        p.validate()?;
        self.inner.value(&p)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOptResult {
    pub policy: PolicyParams,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// No decrease was found; `policy` is the starting policy.
    pub stalled: bool,
}

pub fn default_policy_optimizer() -> MinimizeConfig {
    MinimizeConfig { max_iters: 40, grad_tol: 1e-2, max_step: 2.0, ..Default::default() }
}

/// Minimize any policy objective from `policy0`.
pub fn optimize_policy_with<O: PolicyObjective>(
    objective: &mut O,
    policy0: &PolicyParams,
    cfg: &MinimizeConfig,
) -> Result<PolicyOptResult> {
    policy0.validate()?;
    let mut flat = Flat { template: policy0, inner: objective };
    let res = minimize(&mut flat, policy0.to_flat(), cfg)?;
    Ok(PolicyOptResult {
        policy: if res.stalled { policy0.clone() } else { policy0.with_flat(&res.x) },
        initial_cost: res.trace[0],
        final_cost: res.value,
        gradient_norm: res.gradient.norm(),
        iterations: res.iterations,
        termination: res.termination,
        stalled: res.stalled,
        trace: res.trace,
    })
}

/// Descend the predicted cost-to-go under `gp`.
pub fn optimize_policy(
    gp: &GPModel,
    policy0: &PolicyParams,
    cost: &CostConfig,
    cfg: &MinimizeConfig,
) -> Result<PolicyOptResult> {
    optimize_policy_with(&mut RolloutObjective { gp, cost }, policy0, cfg)
}

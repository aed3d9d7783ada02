//! Model-based policy search producing the expert controller.

pub mod cost;
pub mod optimize;
pub mod pilco;
pub mod policy;
pub mod rollout;

pub use cost::{expected_cost, expected_cost_with_gradient, CostConfig, ExpectedCost};
pub use optimize::{
    default_policy_optimizer, optimize_policy, optimize_policy_with, PolicyObjective, PolicyOptResult,
    RolloutObjective,
};
pub use pilco::{
    pilco_loop, realized_cost, run_loop, sample_initial_state, write_log_csv, IterationLog, LoopConfig, LoopOutcome,
    PilcoBackend, PolicyBackend,
};
pub use policy::{squash, squash_moments, ControlMoments, PolicyGradient, PolicyInit, PolicyParams, SquashMoments};
pub use rollout::{predict_rollout, rollout_gradient, PredictedRollout};

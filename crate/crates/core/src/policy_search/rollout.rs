//! Multi-step prediction of the state distribution under a policy, the
//! resulting expected cost-to-go, and its reverse-mode gradient.

use nalgebra::{DMatrix, DVector};

use super::cost::{expected_cost_with_gradient, CostConfig};
use super::policy::PolicyParams;
use crate::error::{Error, Result};
use crate::gp::{GPModel, Moments};
use crate::linalg::{min_eigenvalue, symmetrize_mut};
use crate::plant::STATE_DIM;

const D: usize = STATE_DIM;

/// Predicted Gaussian state marginals for `t = 0..=T` and the cost-to-go.
#[derive(Debug, Clone)]
pub struct PredictedRollout {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

fn joint_input(m: &DVector<f64>, s: &DMatrix<f64>, policy: &PolicyParams) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = policy.control_moments(m, s)?;
    let mut mj = DVector::zeros(D + 1);
    mj.rows_mut(0, D).copy_from(m);
    mj[D] = c.mean;
    let mut sj = DMatrix::zeros(D + 1, D + 1);
    sj.view_mut((0, 0), (D, D)).copy_from(s);
    for i in 0..D {
        sj[(i, D)] = c.cross[i];
        sj[(D, i)] = c.cross[i];
    }
    sj[(D, D)] = c.var;
    Ok((mj, sj))
}

/// One step of moment propagation: `x' = x + delta(x, u)`.
fn propagate(
    gp: &GPModel,
    policy: &PolicyParams,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
    step: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mj, sj) = joint_input(m, s, policy)?;
    let out = gp.predict_uncertain(&mj, &sj)?;
    let v = out.cross.rows(0, D);
    let m_next = m + &out.mean;
    let mut s_next = s + &out.cov + v + v.transpose();
    symmetrize_mut(&mut s_next);
    let min_eig = min_eigenvalue(&s_next);
    if !min_eig.is_finite() || min_eig < -1e-9 * s_next.trace().abs().max(1.0) {
        return Err(Error::Propagation { step, min_eig });
    }
    Ok((m_next, s_next))
}

fn check_model(gp: &GPModel) -> Result<()> {
    if gp.input_dim() != D + 1 || gp.output_dim() != D {
        return Err(Error::Shape(format!(
            "rollout needs a (state, control) -> state-difference model, got {} -> {}",
            gp.input_dim(),
            gp.output_dim()
        )));
    }
    Ok(())
}

/// Propagate `N(mu_0, Sigma_0)` through policy and model for `cost.horizon`
/// steps and sum the expected costs of all `T + 1` marginals.
pub fn predict_rollout(gp: &GPModel, policy: &PolicyParams, cost: &CostConfig) -> Result<PredictedRollout> {
    check_model(gp)?;
    let mut m = DVector::from_column_slice(&cost.init_mean.to_array());
    let mut s = cost.init_cov_matrix();
    let mut out = PredictedRollout { means: vec![], covs: vec![], costs: vec![], total_cost: 0.0 };
    for t in 0..=cost.horizon {
        let c = expected_cost_with_gradient(&m, &s, cost)?.value;
        out.costs.push(c);
        out.total_cost += c;
        out.means.push(m.clone());
        out.covs.push(s.clone());
        if t < cost.horizon {
            let (mn, sn) = propagate(gp, policy, &m, &s, t + 1)?;
            m = mn;
            s = sn;
        }
    }
    Ok(out)
}

/// Cost-to-go and its gradient with respect to [`PolicyParams::to_flat`].
pub fn rollout_gradient(gp: &GPModel, policy: &PolicyParams, cost: &CostConfig) -> Result<(f64, DVector<f64>)> {
    let fwd = predict_rollout(gp, policy, cost)?;
    let horizon = cost.horizon;
    let mut grad = DVector::zeros(policy.to_flat().len());

    let last = expected_cost_with_gradient(&fwd.means[horizon], &fwd.covs[horizon], cost)?;
    let mut lam_m = last.d_mean;
    let mut lam_s = last.d_cov;

    for t in (0..horizon).rev() {
        let (m, s) = (&fwd.means[t], &fwd.covs[t]);
        // x' = x + delta: the identity path plus the model path
        let (mj, sj) = joint_input(m, s, policy)?;
        let mut cross_adj = DMatrix::zeros(D + 1, D);
        cross_adj.view_mut((0, 0), (D, D)).copy_from(&(&lam_s * 2.0));
        let seed = Moments { mean: lam_m.clone(), cov: lam_s.clone(), cross: cross_adj };
        let g = gp.expansion().moments_vjp(&mj, &sj, &seed)?;

        let mut new_m = lam_m + g.mean.rows(0, D);
        let mut new_s = lam_s + g.cov.view((0, 0), (D, D));
        let adj_u_mean = g.mean[D];
        let adj_u_var = g.cov[(D, D)];
        let adj_u_cross = g.cov.view((0, D), (D, 1)).column(0) * 2.0;
        let pg = policy.control_moments_vjp(m, s, adj_u_mean, adj_u_var, &adj_u_cross)?;
        new_m += pg.state_mean;
        new_s += pg.state_cov;
        grad += pg.params;

        let c = expected_cost_with_gradient(m, s, cost)?;
        lam_m = new_m + c.d_mean;
        lam_s = new_s + c.d_cov;
        symmetrize_mut(&mut lam_s);
    }
    Ok((fwd.total_cost, grad))
}

//! Expert data and PID error features.
//!
//! For every feedback channel `c` the error is `e_c = x_des_c - x_c`; the
//! integral feature is the running `dt`-weighted sum including the current
//! sample, and the derivative feature is the backward difference with the
//! convention `e_{-1} = e_0`. Feature rows are laid out as
//! `[e_1 .. e_C, i_1 .. i_C, d_1 .. d_C]`, which is the column order of the
//! PID gain matrix.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::plant::{PlantState, Trajectory, STATE_DIM};

/// Human-readable names of the state components.
pub const STATE_NAMES: [&str; STATE_DIM] = ["x", "x_dot", "theta", "theta_dot"];

/// Default feedback channels for the cart-pole: cart position and pole angle.
pub const CART_POLE_CHANNELS: [usize; 2] = [0, 2];

/// Proportional, integral and derivative error for each channel at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub proportional: Vec<f64>,
    pub integral: Vec<f64>,
    pub derivative: Vec<f64>,
}

impl ErrorRecord {
    pub fn channels(&self) -> usize {
        self.proportional.len()
    }

    /// Flattened `[e.., i.., d..]` row.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(3 * self.channels());
        f.extend_from_slice(&self.proportional);
        f.extend_from_slice(&self.integral);
        f.extend_from_slice(&self.derivative);
        f
    }
}

fn check_channels(channels: &[usize]) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::Config("at least one feedback channel is required".into()));
    }
    if let Some(c) = channels.iter().find(|&&c| c >= STATE_DIM) {
        return Err(Error::Config(format!("channel index {c} out of range (state has {STATE_DIM} components)")));
    }
    Ok(())
}

/// Error features for every state of `traj` (one record per state).
pub fn compute_errors(
    traj: &Trajectory,
    x_des: &PlantState,
    channels: &[usize],
    dt: f64,
) -> Result<Vec<ErrorRecord>> {
    check_channels(channels)?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let target = x_des.to_array();
    let mut integral = vec![0.0; channels.len()];
    let mut previous: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(traj.states.len());
    for s in &traj.states {
        let state = s.to_array();
        let e: Vec<f64> = channels.iter().map(|&c| target[c] - state[c]).collect();
        for (acc, ek) in integral.iter_mut().zip(&e) {
            *acc += dt * ek;
        }
        let prev = previous.as_ref().unwrap_or(&e);
        let derivative = e.iter().zip(prev).map(|(a, b)| (a - b) / dt).collect();
        out.push(ErrorRecord { proportional: e.clone(), integral: integral.clone(), derivative });
        previous = Some(e);
    }
    Ok(out)
}

/// Rows contributed by one source trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub trajectory: usize,
    pub first_row: usize,
    pub rows: usize,
}

/// Error features paired with the controls they produced.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    /// `n x 3C`, columns `[e.., i.., d..]`.
    pub features: DMatrix<f64>,
    /// `n x N`.
    pub controls: DMatrix<f64>,
    pub channels: Vec<usize>,
    pub sources: Vec<Provenance>,
}

impl AugmentedDataset {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.controls.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.controls.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows vs {} control rows",
                self.features.nrows(),
                self.controls.nrows()
            )));
        }
        if self.features.ncols() != 3 * self.channels.len() {
            return Err(Error::Shape(format!(
                "{} feature columns for {} channels",
                self.features.ncols(),
                self.channels.len()
            )));
        }
        if self.features.iter().chain(self.controls.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DataQuality("dataset holds non-finite entries".into()));
        }
        Ok(())
    }

    /// Column names in storage order, e.g. `e_x,e_theta,i_x,i_theta,d_x,d_theta,u`.
    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::new();
        for prefix in ["e", "i", "d"] {
            for &c in &self.channels {
                h.push(format!("{prefix}_{}", STATE_NAMES[c]));
            }
        }
        if self.inputs() == 1 {
            h.push("u".into());
        } else {
            h.extend((0..self.inputs()).map(|k| format!("u{k}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for r in 0..self.rows() {
            let row = self
                .features
                .row(r)
                .iter()
                .chain(self.controls.row(r).iter())
                .map(|v| v.to_string())
                .collect::<Vec<_>>();
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Build the augmented dataset from expert rollouts.
///
/// Row `k` of a trajectory pairs control `u_k` with the features of state
/// `s_k`, i.e. the information available before `u_k` was applied. Integral
/// and derivative state restart at every trajectory boundary.
pub fn augment(
    trajectories: &[Trajectory],
    x_des: &PlantState,
    channels: &[usize],
    dt: f64,
) -> Result<AugmentedDataset> {
    if trajectories.is_empty() {
        return Err(Error::EmptyData("no trajectories to augment".into()));
    }
    check_channels(channels)?;
    let rows: usize = trajectories.iter().map(Trajectory::len).sum();
    let width = 3 * channels.len();
    let mut features = DMatrix::zeros(rows, width);
    let mut controls = DMatrix::zeros(rows, 1);
    let mut sources = Vec::with_capacity(trajectories.len());
    let mut r = 0;
    for (idx, traj) in trajectories.iter().enumerate() {
        traj.validate()?;
        if (traj.params_used.dt - dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "trajectory {idx} sampled at {} s, dataset at {dt} s",
                traj.params_used.dt
            )));
        }
        let records = compute_errors(traj, x_des, channels, dt)?;
        for (k, u) in traj.controls.iter().enumerate() {
            for (j, v) in records[k].features().into_iter().enumerate() {
                features[(r + k, j)] = v;
            }
            controls[(r + k, 0)] = *u;
        }
        sources.push(Provenance { trajectory: idx, first_row: r, rows: traj.len() });
        r += traj.len();
    }
    let data = AugmentedDataset { features, controls, channels: channels.to_vec(), sources };
    data.validate()?;
    Ok(data)
}

/// GP regression pairs: inputs `[x^T u]` and targets `x_{k+1} - x_k`.
pub fn gp_training_pairs(trajectories: &[Trajectory]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n: usize = trajectories.iter().map(Trajectory::len).sum();
    if n == 0 {
        return Err(Error::EmptyData("no transitions for GP training".into()));
    }
    let mut inputs = DMatrix::zeros(n, STATE_DIM + 1);
    let mut targets = DMatrix::zeros(n, STATE_DIM);
    let mut r = 0;
    for traj in trajectories {
        traj.validate()?;
        for (k, u) in traj.controls.iter().enumerate() {
            let s = traj.states[k].to_array();
            let next = traj.states[k + 1].to_array();
            for d in 0..STATE_DIM {
                inputs[(r, d)] = s[d];
                targets[(r, d)] = next[d] - s[d];
            }
            inputs[(r, STATE_DIM)] = *u;
            r += 1;
        }
    }
    Ok((inputs, targets))
}

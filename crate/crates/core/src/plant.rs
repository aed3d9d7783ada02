//! Cart-pole plant: continuous dynamics, discrete noisy stepping, parameter
//! sampling and closed-loop rollouts.
//!
//! The pole is a point mass `m` on a massless rod of length `l`, hinged on a
//! cart of mass `M`. The angle `theta` is measured from the upright position,
//! so `(0, 0, 0, 0)` is the unstable equilibrium. With `F` the applied force,
//! `tau` a torque acting on the pole and `b` the cart friction coefficient:
//!
//! ```text
//! (M + m) x''      + m l cos(theta) theta'' = F - b x' + m l sin(theta) theta'^2
//! m l cos(theta) x'' + m l^2 theta''          = tau + m g l sin(theta)
//! ```
//!
//! One discrete step integrates these equations over `dt` with classic RK4
//! (optionally split into sub-steps) and then adds the process-noise draw.

use std::fmt;
use std::io::{Read, Write};

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of state dimensions.
pub const STATE_DIM: usize = 4;

/// Cart-pole state. The angle is never wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl PlantState {
    pub const fn new(x: f64, x_dot: f64, theta: f64, theta_dot: f64) -> Self {
        Self { x, x_dot, theta, theta_dot }
    }

    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.x_dot, self.theta, self.theta_dot)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.to_array().get(index).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to another state.
    pub fn distance(&self, other: &PlantState) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl fmt::Display for PlantState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(x={:.4}, x_dot={:.4}, theta={:.4}, theta_dot={:.4})",
            self.x, self.x_dot, self.theta, self.theta_dot
        )
    }
}

/// Physical and simulation parameters of the cart-pole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Cart mass (kg).
    pub cart_mass: f64,
    /// Pendulum point mass (kg).
    pub pendulum_mass: f64,
    /// Rod length (m).
    pub pole_length: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
    /// Viscous cart friction (N s/m).
    pub cart_friction: f64,
    /// Per-state process-noise variance, added after each step.
    pub noise_var: [f64; STATE_DIM],
    /// Sampling time (s).
    pub dt: f64,
    /// Input saturation (N).
    pub u_max: f64,
    /// RK4 sub-steps per sampling interval.
    pub substeps: usize,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pendulum_mass: 0.2,
            pole_length: 0.5,
            gravity: 9.81,
            cart_friction: 0.1,
            noise_var: [1e-4; STATE_DIM],
            dt: 0.05,
            u_max: 10.0,
            substeps: 10,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cart_mass", self.cart_mass),
            ("pendulum_mass", self.pendulum_mass),
            ("pole_length", self.pole_length),
            ("dt", self.dt),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.gravity.is_finite() || !self.cart_friction.is_finite() || self.cart_friction < 0.0 {
            return Err(Error::Config("gravity must be finite and friction non-negative".into()));
        }
        if self.noise_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("noise variances must be non-negative, got {:?}", self.noise_var)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// Same parameters with the process noise switched off.
    pub fn noiseless(&self) -> Self {
        Self { noise_var: [0.0; STATE_DIM], ..self.clone() }
    }

    pub fn clamp_control(&self, u: f64) -> f64 {
        u.clamp(-self.u_max, self.u_max)
    }

    /// Continuous-time state derivative for total cart force `force` and pole
    /// torque `torque`.
    pub fn derivative(&self, s: &Vector4<f64>, force: f64, torque: f64) -> Vector4<f64> {
        let (big_m, m, l, g) = (self.cart_mass, self.pendulum_mass, self.pole_length, self.gravity);
        let (sin, cos) = s[2].sin_cos();
        let theta_dot = s[3];
        let r1 = force - self.cart_friction * s[1] + m * l * sin * theta_dot * theta_dot;
        let r2 = torque + m * g * l * sin;
        let denom = big_m + m * sin * sin;
        let x_acc = (l * r1 - cos * r2) / (l * denom);
        let theta_acc = ((big_m + m) * r2 - m * l * cos * r1) / (m * l * l * denom);
        Vector4::new(s[1], x_acc, theta_dot, theta_acc)
    }

    /// Total mechanical energy (J), with zero potential at the pivot height.
    pub fn energy(&self, s: &PlantState) -> f64 {
        let (big_m, m, l, g) = (self.cart_mass, self.pendulum_mass, self.pole_length, self.gravity);
        let cos = s.theta.cos();
        0.5 * (big_m + m) * s.x_dot * s.x_dot
            + m * l * s.x_dot * s.theta_dot * cos
            + 0.5 * m * l * l * s.theta_dot * s.theta_dot
            + m * g * l * cos
    }
}

/// Which channel a disturbance enters through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceChannel {
    /// Force on the cart, alongside the control input.
    Matched,
    /// Torque on the pole.
    Unmatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceProfile {
    /// Active for exactly one sampling interval.
    Impulse,
    /// Active for `duration` seconds.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub channel: DisturbanceChannel,
    pub profile: DisturbanceProfile,
    /// N for matched, N m for unmatched.
    pub magnitude: f64,
    pub start_time: f64,
    pub duration: f64,
}

impl Disturbance {
    pub fn impulse(channel: DisturbanceChannel, magnitude: f64, start_time: f64) -> Self {
        Self { channel, profile: DisturbanceProfile::Impulse, magnitude, start_time, duration: 0.0 }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if !self.magnitude.is_finite() || !self.start_time.is_finite() || self.start_time < 0.0 {
            return Err(Error::Config("disturbance magnitude and start time must be finite".into()));
        }
        if self.profile == DisturbanceProfile::Step && self.duration < dt {
            return Err(Error::Config(format!(
                "step disturbance duration {} shorter than dt {dt}",
                self.duration
            )));
        }
        Ok(())
    }

    fn start_step(&self, dt: f64) -> usize {
        (self.start_time / dt).round() as usize
    }

    /// `(matched force, unmatched torque)` applied during step `index`.
    pub fn forces_at(&self, index: usize, dt: f64) -> (f64, f64) {
        let start = self.start_step(dt);
        let active = match self.profile {
            DisturbanceProfile::Impulse => index == start,
            DisturbanceProfile::Step => {
                let steps = (self.duration / dt).round().max(1.0) as usize;
                index >= start && index < start + steps
            }
        };
        if !active {
            return (0.0, 0.0);
        }
        match self.channel {
            DisturbanceChannel::Matched => (self.magnitude, 0.0),
            DisturbanceChannel::Unmatched => (0.0, self.magnitude),
        }
    }
}

/// Advance the plant by one sampling interval.
///
/// `u` is clamped to `[-u_max, u_max]`; the matched disturbance is added to the
/// clamped force and the unmatched one acts as a pole torque. `noise` is added
/// after integration.
pub fn step(
    state: &PlantState,
    u: f64,
    params: &PlantParams,
    disturbance: (f64, f64),
    noise: &[f64; STATE_DIM],
) -> Result<PlantState> {
    if !u.is_finite() || !state.is_finite() {
        return Err(Error::Divergence { step: 0, state: *state });
    }
    let force = params.clamp_control(u) + disturbance.0;
    let torque = disturbance.1;
    let h = params.dt / params.substeps as f64;
    let mut s = state.to_vector();
    for _ in 0..params.substeps {
        let k1 = params.derivative(&s, force, torque);
        let k2 = params.derivative(&(s + k1 * (0.5 * h)), force, torque);
        let k3 = params.derivative(&(s + k2 * (0.5 * h)), force, torque);
        let k4 = params.derivative(&(s + k3 * h), force, torque);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    s += Vector4::from_column_slice(noise);
    let next = PlantState::from_vector(&s);
    if !next.is_finite() {
        return Err(Error::Divergence { step: 0, state: next });
    }
    Ok(next)
}

/// Diagonal variances of the randomized physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVariance {
    pub pendulum_mass: f64,
    pub pole_length: f64,
}

impl Default for ParamVariance {
    fn default() -> Self {
        Self { pendulum_mass: 0.0025, pole_length: 0.005 }
    }
}

const MAX_PARAM_DRAWS: usize = 100;

/// Draw `(m, l)` from a Gaussian around `mean`, resampling non-positive draws.
pub fn sample_params_with<R: Rng + ?Sized>(
    mean: &PlantParams,
    var: &ParamVariance,
    rng: &mut R,
) -> Result<PlantParams> {
    if !(var.pendulum_mass >= 0.0 && var.pole_length >= 0.0) {
        return Err(Error::Config(format!("parameter variances must be non-negative: {var:?}")));
    }
    let (sd_m, sd_l) = (var.pendulum_mass.sqrt(), var.pole_length.sqrt());
    for _ in 0..MAX_PARAM_DRAWS {
        let zm: f64 = StandardNormal.sample(rng);
        let zl: f64 = StandardNormal.sample(rng);
        let m = mean.pendulum_mass + sd_m * zm;
        let l = mean.pole_length + sd_l * zl;
        if m > 0.0 && l > 0.0 {
            return Ok(PlantParams { pendulum_mass: m, pole_length: l, ..mean.clone() });
        }
    }
    Err(Error::Config(format!(
        "no positive (m, l) draw in {MAX_PARAM_DRAWS} attempts; variances too large for the mean"
    )))
}

pub fn sample_params(mean: &PlantParams, var: &ParamVariance, seed: u64) -> Result<PlantParams> {
    sample_params_with(mean, var, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Recorded closed-loop rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<PlantState>,
    pub controls: Vec<f64>,
    pub times: Vec<f64>,
    pub params_used: PlantParams,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn final_state(&self) -> &PlantState {
        self.states.last().expect("trajectory always holds the initial state")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.controls.len();
        if self.states.len() != n + 1 || self.times.len() != n + 1 {
            return Err(Error::Shape(format!(
                "trajectory with {} states, {} controls, {} times",
                self.states.len(),
                n,
                self.times.len()
            )));
        }
        Ok(())
    }

    /// CSV with header `t,x,x_dot,theta,theta_dot,u`; the final row has an
    /// empty `u`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "x", "x_dot", "theta", "theta_dot", "u"])?;
        for (i, (s, t)) in self.states.iter().zip(&self.times).enumerate() {
            let u = self.controls.get(i).map(|u| u.to_string()).unwrap_or_default();
            w.write_record([
                t.to_string(),
                s.x.to_string(),
                s.x_dot.to_string(),
                s.theta.to_string(),
                s.theta_dot.to_string(),
                u,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Trajectory::write_csv`]; `params` is attached as-is.
    pub fn read_csv<R: Read>(reader: R, params: PlantParams) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let (mut states, mut controls, mut times) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Shape(format!("missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Shape(format!("column {i}: {e}")))
            };
            times.push(num(0)?);
            states.push(PlantState::new(num(1)?, num(2)?, num(3)?, num(4)?));
            match rec.get(5) {
                Some(u) if !u.is_empty() => controls.push(num(5)?),
                _ => {}
            }
        }
        let traj = Trajectory { states, controls, times, params_used: params };
        traj.validate()?;
        Ok(traj)
    }
}

/// Draw one process-noise vector.
pub fn draw_noise<R: Rng + ?Sized>(params: &PlantParams, rng: &mut R) -> [f64; STATE_DIM] {
    let mut noise = [0.0; STATE_DIM];
    for (n, var) in noise.iter_mut().zip(params.noise_var) {
        let z: f64 = StandardNormal.sample(rng);
        *n = var.sqrt() * z;
    }
    noise
}

/// Closed-loop rollout of `horizon` steps.
///
/// The controller sees every state before its control is applied. Noise is
/// drawn from a ChaCha8 stream seeded with `seed`, so equal inputs give
/// bitwise-equal trajectories.
pub fn rollout<C>(
    mut controller: C,
    x0: PlantState,
    horizon: usize,
    params: &PlantParams,
    disturbance: Option<&Disturbance>,
    seed: u64,
) -> Result<Trajectory>
where
    C: FnMut(&PlantState) -> f64,
{
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    params.validate()?;
    if let Some(d) = disturbance {
        d.validate(params.dt)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let times = (0..=horizon).map(|k| k as f64 * params.dt).collect();
    let mut state = x0;
    states.push(state);
    for k in 0..horizon {
        let u = params.clamp_control(controller(&state));
        let dist = disturbance.map_or((0.0, 0.0), |d| d.forces_at(k, params.dt));
        let noise = draw_noise(params, &mut rng);
        state = match step(&state, u, params, dist, &noise) {
            Ok(s) => s,
            Err(Error::Divergence { state, .. }) => return Err(Error::Divergence { step: k, state }),
            Err(e) => return Err(e),
        };
        controls.push(u);
        states.push(state);
    }
    Ok(Trajectory { states, controls, times, params_used: params.clone() })
}

//! Online PID controller whose features match the offline dataset exactly.

use super::PidGains;
use crate::plant::PlantState;

/// Integral accumulator and previous error, one entry per channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PidState {
    pub integral: Vec<f64>,
    pub prev_error: Option<Vec<f64>>,
}

/// Advance the error state by one sample and return the `[e.., i.., d..]`
/// feature row. The first call uses `e_{-1} = e_0`, so its derivative is 0.
pub fn pid_features(state: &PidState, e: &[f64], dt: f64) -> (Vec<f64>, PidState) {
    let mut integral = if state.integral.len() == e.len() { state.integral.clone() } else { vec![0.0; e.len()] };
    for (acc, ek) in integral.iter_mut().zip(e) {
        *acc += dt * ek;
    }
    let prev = state.prev_error.as_deref().unwrap_or(e);
    let mut f = Vec::with_capacity(3 * e.len());
    f.extend_from_slice(e);
    f.extend_from_slice(&integral);
    f.extend(e.iter().zip(prev).map(|(a, b)| (a - b) / dt));
    (f, PidState { integral, prev_error: Some(e.to_vec()) })
}

/// One PID update: `u = clamp(K e_tilde)`. With `anti_windup` the integral
/// is held at its previous value whenever the output saturates.
pub fn pid_control(
    gains: &PidGains,
    state: &PidState,
    e: &[f64],
    dt: f64,
    u_max: f64,
    anti_windup: bool,
) -> (Vec<f64>, PidState) {
    let (mut f, mut next) = pid_features(state, e, dt);
    let mut u = gains.mean_control(&f);
    if anti_windup && u.iter().any(|v| v.abs() > u_max) {
        let c = e.len();
        let held = if state.integral.len() == c { state.integral.clone() } else { vec![0.0; c] };
        f[c..2 * c].copy_from_slice(&held);
        next.integral = held;
        u = gains.mean_control(&f);
    }
    (u.into_iter().map(|v| v.clamp(-u_max, u_max)).collect(), next)
}

/// Stateful single-input PID controller for closed-loop rollouts.
#[derive(Debug, Clone)]
pub struct PidController {
    pub gains: PidGains,
    pub x_des: PlantState,
    pub dt: f64,
    pub u_max: f64,
    pub anti_windup: bool,
    pub state: PidState,
}

impl PidController {
    pub fn new(gains: PidGains, x_des: PlantState, dt: f64, u_max: f64) -> Self {
        Self { gains, x_des, dt, u_max, anti_windup: false, state: PidState::default() }
    }

    pub fn reset(&mut self) {
        self.state = PidState::default();
    }

    pub fn error(&self, s: &PlantState) -> Vec<f64> {
        let (target, state) = (self.x_des.to_array(), s.to_array());
        self.gains.channels.iter().map(|&c| target[c] - state[c]).collect()
    }

    /// Control for the first input.
    pub fn control(&mut self, s: &PlantState) -> f64 {
        let e = self.error(s);
        let (u, next) = pid_control(&self.gains, &self.state, &e, self.dt, self.u_max, self.anti_windup);
        self.state = next;
        u[0]
    }
}

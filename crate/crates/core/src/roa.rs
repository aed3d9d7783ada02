//! Region-of-attraction estimate from closed-loop trajectory data.
//!
//! Each grid initial condition `(theta, theta_dot)` (cart at rest at the
//! origin) is rolled out without noise. Its Lyapunov value is the truncated
//! integral of the squared distance to the target. A quadratic `V*` is fitted
//! to the converged samples and the ROA is its largest sublevel set that
//! contains only converged grid samples.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::PidController;
use crate::error::{Error, Result};
use crate::plant::{rollout, PlantParams, PlantState, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub theta0: f64,
    pub theta_dot0: f64,
    /// `+inf` when the rollout did not converge.
    pub v: f64,
    pub converged: bool,
}

/// `V = sum_k |s_k - s_des|^2 dt`; converged iff every state in the final
/// 10% of the trajectory lies within `tail_tol` of the target.
pub fn lyapunov_value(traj: &Trajectory, x_des: &PlantState, dt: f64, tail_tol: f64) -> (f64, bool) {
    let n = traj.states.len();
    if n == 0 || traj.states.iter().any(|s| !s.is_finite()) {
        return (f64::INFINITY, false);
    }
    let tail = n.div_ceil(10).max(1);
    let converged = traj.states[n - tail..].iter().all(|s| s.distance(x_des) < tail_tol);
    if !converged {
        return (f64::INFINITY, false);
    }
    let v = traj.states.iter().map(|s| s.distance(x_des).powi(2) * dt).sum();
    (v, true)
}

/// Uniform `resolution x resolution` grid, `theta` varying slowest.
pub fn sample_grid(theta_range: (f64, f64), theta_dot_range: (f64, f64), resolution: usize) -> Result<Vec<(f64, f64)>> {
    let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && hi >= lo;
    if !ok(theta_range) || !ok(theta_dot_range) || resolution == 0 {
        return Err(Error::Config(format!(
            "invalid grid: theta {theta_range:?}, theta_dot {theta_dot_range:?}, resolution {resolution}"
        )));
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if resolution == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect()
    };
    let (ts, tds) = (axis(theta_range), axis(theta_dot_range));
    Ok(ts.iter().flat_map(|&t| tds.iter().map(move |&td| (t, td))).collect())
}

/// `V*(t, td) = a t^2 + b t td + c td^2 + d t + e td`, zero at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovFit {
    pub coeffs: [f64; 5],
    /// Coefficient of determination over the converged samples.
    pub r2: f64,
}

fn basis(t: f64, td: f64) -> [f64; 5] {
    [t * t, t * td, td * td, t, td]
}

impl LyapunovFit {
    pub fn value(&self, t: f64, td: f64) -> f64 {
        basis(t, td).iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }

    /// Symmetric matrix of the quadratic part.
    pub fn quadratic(&self) -> Matrix2<f64> {
        let [a, b, c, ..] = self.coeffs;
        Matrix2::new(a, 0.5 * b, 0.5 * b, c)
    }

    pub fn linear(&self) -> Vector2<f64> {
        Vector2::new(self.coeffs[3], self.coeffs[4])
    }

    /// Largest level whose sublevel ellipse lies inside the box, or `None`
    /// when the quadratic part is not positive definite or the centre is
    /// outside the box.
    pub fn box_level(&self, theta_range: (f64, f64), theta_dot_range: (f64, f64)) -> Option<f64> {
        let chol = self.quadratic().cholesky()?;
        let centre = -0.5 * chol.solve(&self.linear());
        let inv = chol.inverse();
        let mut r2 = f64::INFINITY;
        for (i, (lo, hi)) in [theta_range, theta_dot_range].into_iter().enumerate() {
            let (below, above) = (centre[i] - lo, hi - centre[i]);
            if below < 0.0 || above < 0.0 {
                return None;
            }
            // the ellipse (p - p0)^T A (p - p0) = r2 reaches p0_i +- sqrt(r2 (A^-1)_ii)
            r2 = r2.min(below.min(above).powi(2) / inv[(i, i)]);
        }
        Some(self.value(centre[0], centre[1]) + r2)
    }

    /// Points on the level set `V* = c`, evenly spaced in angle around the
    /// ellipse centre.
    pub fn level_curve(&self, c: f64, n: usize) -> Result<Vec<(f64, f64)>> {
        let a = self.quadratic();
        let chol = a.cholesky().ok_or_else(|| Error::FitQuality("quadratic part is not positive definite".into()))?;
        let centre = -0.5 * chol.solve(&self.linear());
        let r2 = c - self.value(centre[0], centre[1]);
        if !(r2 >= 0.0) {
            return Err(Error::Domain(format!("level {c} lies below the minimum of the fitted function")));
        }
        // (p - p0)^T A (p - p0) = r2  <=>  p = p0 + sqrt(r2) L^-T w, |w| = 1
        let lt = chol.l().transpose();
        let mut pts = Vec::with_capacity(n);
        for k in 0..n {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let w = Vector2::new(phi.cos(), phi.sin()) * r2.sqrt();
            let p = centre + lt.solve_upper_triangular(&w).expect("positive diagonal");
            pts.push((p[0], p[1]));
        }
        Ok(pts)
    }
}

/// Least-squares quadratic through the converged samples.
pub fn fit_lyapunov(samples: &[LyapunovSample]) -> Result<LyapunovFit> {
    let good: Vec<&LyapunovSample> = samples.iter().filter(|s| s.converged && s.v.is_finite()).collect();
    if good.len() < 6 {
        return Err(Error::FitQuality(format!("{} converged samples; at least 6 are needed", good.len())));
    }
    let a = DMatrix::from_fn(good.len(), 5, |i, j| basis(good[i].theta0, good[i].theta_dot0)[j]);
    let y = DVector::from_iterator(good.len(), good.iter().map(|s| s.v));
    let x = a
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Conditioning(format!("Lyapunov regression: {e}")))?;
    let coeffs = [x[0], x[1], x[2], x[3], x[4]];
    let resid = &y - &a * &x;
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - resid.norm_squared() / tss } else { 1.0 };
    let fit = LyapunovFit { coeffs, r2 };
    let q = fit.quadratic();
    if !(q[(0, 0)] > 0.0 && q.determinant() > 0.0) {
        return Err(Error::FitQuality(format!(
            "fitted quadratic is not positive definite ({:?}); refine the grid",
            fit.coeffs
        )));
    }
    Ok(fit)
}

/// Largest level `c*` (among sample values of `V*`) whose sublevel set holds
/// only converged samples. Converged samples tied with a non-converged one,
/// up to a relative `1e-9`, are excluded.
pub fn level_set(fit: &LyapunovFit, samples: &[LyapunovSample]) -> Result<f64> {
    let value = |s: &LyapunovSample| fit.value(s.theta0, s.theta_dot0);
    let v0 = samples.iter().filter(|s| !s.converged).map(value).fold(f64::INFINITY, f64::min);
    let limit = if v0.is_finite() { v0 - 1e-9 * v0.abs().max(1.0) } else { f64::INFINITY };
    samples
        .iter()
        .filter(|s| s.converged)
        .map(value)
        .filter(|v| *v < limit)
        .fold(None, |c: Option<f64>, v| Some(c.map_or(v, |c| c.max(v))))
        .ok_or(Error::EmptyRoa)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryResult {
    pub theta0: f64,
    pub theta_dot0: f64,
    pub converged: bool,
    pub final_distance: f64,
}

#[derive(Debug, Clone)]
pub struct BoundaryReport {
    pub results: Vec<BoundaryResult>,
    pub trajectories: Vec<Option<Trajectory>>,
}

impl BoundaryReport {
    pub fn fraction_converged(&self) -> f64 {
        if self.results.is_empty() {
            return 0.0;
        }
        self.results.iter().filter(|r| r.converged).count() as f64 / self.results.len() as f64
    }
}

fn initial_state(t: f64, td: f64) -> PlantState {
    PlantState::new(0.0, 0.0, t, td)
}

fn closed_loop(template: &PidController, plant: &PlantParams, x0: PlantState, horizon: usize) -> Result<Trajectory> {
    let mut c = template.clone();
    c.reset();
    rollout(|s| c.control(s), x0, horizon, &plant.noiseless(), None, 0)
}

/// Noise-free closed-loop rollouts from each point.
pub fn verify_boundary(
    plant: &PlantParams,
    controller: &PidController,
    points: &[(f64, f64)],
    horizon: usize,
    tail_tol: f64,
) -> Result<BoundaryReport> {
    if points.is_empty() {
        return Err(Error::Config("no boundary points to verify".into()));
    }
    let runs: Vec<(BoundaryResult, Option<Trajectory>)> = points
        .par_iter()
        .map(|&(t, td)| match closed_loop(controller, plant, initial_state(t, td), horizon) {
            Ok(traj) => {
                let (_, converged) = lyapunov_value(&traj, &controller.x_des, plant.dt, tail_tol);
                let final_distance = traj.final_state().distance(&controller.x_des);
                (BoundaryResult { theta0: t, theta_dot0: td, converged, final_distance }, Some(traj))
            }
            Err(_) => (
                BoundaryResult { theta0: t, theta_dot0: td, converged: false, final_distance: f64::INFINITY },
                None,
            ),
        })
        .collect();
    let (results, trajectories) = runs.into_iter().unzip();
    Ok(BoundaryReport { results, trajectories })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RoaConfig {
    pub theta_range: (f64, f64),
    pub theta_dot_range: (f64, f64),
    pub resolution: usize,
    /// Rollout length in seconds.
    pub duration: f64,
    pub tail_tol: f64,
    pub boundary_points: usize,
    pub min_r2: f64,
    /// Grid growth factor when the grid or the 2x probe finds no failure.
    pub widen_factor: f64,
    pub max_widenings: usize,
    /// Rounds in which non-converged boundary points are added as samples
    /// and the level lowered.
    pub max_refinements: usize,
}

impl Default for RoaConfig {
    fn default() -> Self {
        Self {
            theta_range: (-0.6, 0.6),
            theta_dot_range: (-2.0, 2.0),
            resolution: 41,
            duration: 10.0,
            tail_tol: 0.05,
            boundary_points: 32,
            min_r2: 0.8,
            widen_factor: 1.5,
            max_widenings: 4,
            max_refinements: 100,
        }
    }
}

impl RoaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 3 || self.boundary_points == 0 {
            return Err(Error::Config("ROA grid needs resolution >= 3 and at least one boundary point".into()));
        }
        if !(self.duration > 0.0 && self.tail_tol > 0.0 && self.widen_factor > 1.0) {
            return Err(Error::Config(format!("invalid ROA settings {self:?}")));
        }
        Ok(())
    }

    pub fn horizon(&self, dt: f64) -> usize {
        (self.duration / dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone)]
pub struct RoaReport {
    pub theta_range: (f64, f64),
    pub theta_dot_range: (f64, f64),
    pub samples: Vec<LyapunovSample>,
    pub fit: LyapunovFit,
    pub c_star: f64,
    pub boundary: Vec<(f64, f64)>,
    pub verification: BoundaryReport,
    /// Non-converged rollouts from the boundary scaled by 2.
    pub probe_failures: usize,
    /// Level from the grid alone, before capping at the grid box and refinement.
    pub grid_c_star: f64,
    /// Boundary fraction converged at the first candidate level.
    pub initial_fraction_converged: f64,
    /// Non-converged boundary points found during refinement.
    pub counterexamples: Vec<LyapunovSample>,
    pub refinement_rounds: usize,
}

impl RoaReport {
    pub fn write_grid_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["theta0", "theta_dot0", "V", "converged"])?;
        for s in &self.samples {
            w.write_record([s.theta0.to_string(), s.theta_dot0.to_string(), s.v.to_string(), s.converged.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> RoaSummary {
        RoaSummary {
            theta_range: self.theta_range,
            theta_dot_range: self.theta_dot_range,
            grid_points: self.samples.len(),
            converged_points: self.samples.iter().filter(|s| s.converged).count(),
            coefficients: self.fit.coeffs,
            r2: self.fit.r2,
            c_star: self.c_star,
            boundary_points: self.verification.results.clone(),
            boundary_fraction_converged: self.verification.fraction_converged(),
            probe_failures: self.probe_failures,
            grid_c_star: self.grid_c_star,
            initial_fraction_converged: self.initial_fraction_converged,
            counterexamples: self.counterexamples.len(),
            refinement_rounds: self.refinement_rounds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoaSummary {
    pub theta_range: (f64, f64),
    pub theta_dot_range: (f64, f64),
    pub grid_points: usize,
    pub converged_points: usize,
    /// Coefficients of `theta^2, theta*theta_dot, theta_dot^2, theta, theta_dot`.
    pub coefficients: [f64; 5],
    pub r2: f64,
    pub c_star: f64,
    pub boundary_points: Vec<BoundaryResult>,
    pub boundary_fraction_converged: f64,
    pub probe_failures: usize,
    pub grid_c_star: f64,
    pub initial_fraction_converged: f64,
    /// Non-converged boundary points added as samples before the final level.
    pub counterexamples: usize,
    pub refinement_rounds: usize,
}

/// Lyapunov samples for every grid point.
pub fn grid_samples(
    plant: &PlantParams,
    controller: &PidController,
    grid: &[(f64, f64)],
    horizon: usize,
    tail_tol: f64,
) -> Vec<LyapunovSample> {
    grid.par_iter()
        .map(|&(t, td)| {
            let (v, converged) = match closed_loop(controller, plant, initial_state(t, td), horizon) {
                Ok(traj) => lyapunov_value(&traj, &controller.x_des, plant.dt, tail_tol),
                Err(_) => (f64::INFINITY, false),
            };
            LyapunovSample { theta0: t, theta_dot0: td, v, converged }
        })
        .collect()
}

/// Grid, fit, level set and boundary verification.
///
/// The grid is widened while every sample converges, while the sublevel
/// ellipse at the grid level leaves the grid, or while the 2x boundary probe
/// finds no failure. The level is capped so the ellipse stays inside the
/// sampled box. Boundary points that fail to converge are kept as
/// counterexample samples and the level is recomputed until the boundary
/// verifies or `max_refinements` rounds are spent.
pub fn estimate_roa(plant: &PlantParams, controller: &PidController, cfg: &RoaConfig) -> Result<RoaReport> {
    cfg.validate()?;
    plant.validate()?;
    let horizon = cfg.horizon(plant.dt);
    let (mut tr, mut tdr) = (cfg.theta_range, cfg.theta_dot_range);
    let mut attempt = 0;
    let mut previous = None;
    loop {
        let can_widen = attempt < cfg.max_widenings;
        let grid = sample_grid(tr, tdr, cfg.resolution)?;
        let samples = grid_samples(plant, controller, &grid, horizon, cfg.tail_tol);
        match analyse_grid(plant, controller, cfg, horizon, tr, tdr, samples.clone(), can_widen) {
            Ok(Some(report)) => return Ok(report),
            Ok(None) => {}
            // a wider grid can leave the quadratic class; keep the last grid that fitted
            Err(Error::FitQuality(msg)) if previous.is_some() => {
                log::warn!("widened grid rejected ({msg}); using the previous grid");
                let (tr, tdr, samples) = previous.take().expect("checked");
                return analyse_grid(plant, controller, cfg, horizon, tr, tdr, samples, false)
                    .map(|r| r.expect("no widening requested"));
            }
            Err(e) => return Err(e),
        }
        previous = Some((tr, tdr, samples));
        attempt += 1;
        tr = (tr.0 * cfg.widen_factor, tr.1 * cfg.widen_factor);
        tdr = (tdr.0 * cfg.widen_factor, tdr.1 * cfg.widen_factor);
    }
}

/// `None` asks the caller to widen the grid.
#[allow(clippy::too_many_arguments)]
fn analyse_grid(
    plant: &PlantParams,
    controller: &PidController,
    cfg: &RoaConfig,
    horizon: usize,
    tr: (f64, f64),
    tdr: (f64, f64),
    samples: Vec<LyapunovSample>,
    can_widen: bool,
) -> Result<Option<RoaReport>> {
    if samples.iter().all(|s| s.converged) && can_widen {
        log::info!("every grid sample converged; widening the grid");
        return Ok(None);
    }
    let fit = fit_lyapunov(&samples)?;
    if fit.r2 < cfg.min_r2 {
        return Err(Error::FitQuality(format!("Lyapunov fit R^2 {:.3} below {}", fit.r2, cfg.min_r2)));
    }
    let grid_c_star = level_set(&fit, &samples)?;
    let box_c = fit.box_level(tr, tdr).ok_or(Error::EmptyRoa)?;
    if grid_c_star > box_c && can_widen {
        log::info!("level set leaves the grid; widening the grid");
        return Ok(None);
    }
    let mut c_star = grid_c_star.min(box_c);
    let mut counterexamples = Vec::new();
    let mut initial_fraction_converged = None;
    let mut rounds = 0;
    let (boundary, verification) = loop {
        let boundary = fit.level_curve(c_star, cfg.boundary_points)?;
        let verification = verify_boundary(plant, controller, &boundary, horizon, cfg.tail_tol)?;
        initial_fraction_converged.get_or_insert(verification.fraction_converged());
        let failed: Vec<LyapunovSample> = verification
            .results
            .iter()
            .filter(|r| !r.converged)
            .map(|r| LyapunovSample { theta0: r.theta0, theta_dot0: r.theta_dot0, v: f64::INFINITY, converged: false })
            .collect();
        if failed.is_empty() || rounds >= cfg.max_refinements {
            break (boundary, verification);
        }
        rounds += 1;
        counterexamples.extend(failed);
        let all: Vec<LyapunovSample> = samples.iter().chain(&counterexamples).copied().collect();
        c_star = level_set(&fit, &all)?.min(box_c);
    };
    if !counterexamples.is_empty() {
        log::info!("level lowered from {grid_c_star} to {c_star} in {rounds} rounds");
    }
    let probe: Vec<(f64, f64)> = boundary.iter().map(|(t, td)| (2.0 * t, 2.0 * td)).collect();
    let probe_failures =
        verify_boundary(plant, controller, &probe, horizon, cfg.tail_tol)?.results.iter().filter(|r| !r.converged).count();
    if probe_failures == 0 && can_widen {
        log::info!("2x boundary probe converged everywhere; widening the grid");
        return Ok(None);
    }
    Ok(Some(RoaReport {
        theta_range: tr,
        theta_dot_range: tdr,
        samples,
        fit,
        c_star,
        boundary,
        verification,
        probe_failures,
        grid_c_star,
        initial_fraction_converged: initial_fraction_converged.unwrap_or(0.0),
        counterexamples,
        refinement_rounds: rounds,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_of(states: Vec<PlantState>) -> Trajectory {
        let n = states.len() - 1;
        Trajectory {
            controls: vec![0.0; n],
            times: (0..=n).map(|k| k as f64).collect(),
            states,
            params_used: PlantParams::default(),
        }
    }

    #[test]
    fn target_trajectory_has_zero_value() {
        let t = traj_of(vec![PlantState::zeros(); 20]);
        assert_eq!(lyapunov_value(&t, &PlantState::zeros(), 0.05, 0.05), (0.0, true));
    }

    #[test]
    fn geometric_decay_sums_to_four_thirds() {
        let n = 40;
        let t = traj_of((0..=n).map(|k| PlantState::new(0.5f64.powi(k), 0.0, 0.0, 0.0)).collect());
        let (v, ok) = lyapunov_value(&t, &PlantState::zeros(), 1.0, 1e-6);
        assert!(ok);
        // finite sum 4/3 (1 - 4^-(n+1))
        let truncation = 4.0 / 3.0 * 0.25f64.powi(n + 1);
        assert!((v - 4.0 / 3.0).abs() <= truncation + 1e-15);
    }

    #[test]
    fn non_converged_is_infinite() {
        let t = traj_of(vec![PlantState::new(1.0, 0.0, 0.0, 0.0); 10]);
        assert_eq!(lyapunov_value(&t, &PlantState::zeros(), 0.05, 0.05), (f64::INFINITY, false));
    }

    #[test]
    fn grid_shape_and_symmetry() {
        assert_eq!(sample_grid((-1.0, 1.0), (-1.0, 1.0), 2).unwrap().len(), 4);
        let g = sample_grid((-0.6, 0.6), (-2.0, 2.0), 5).unwrap();
        for (a, b) in g.iter().zip(g.iter().rev()) {
            assert!((a.0 + b.0).abs() < 1e-15 && (a.1 + b.1).abs() < 1e-15);
        }
    }

    fn exact_samples() -> Vec<LyapunovSample> {
        sample_grid((-1.0, 1.0), (-1.0, 1.0), 7)
            .unwrap()
            .into_iter()
            .map(|(t, td)| LyapunovSample { theta0: t, theta_dot0: td, v: t * t + td * td, converged: true })
            .collect()
    }

    #[test]
    fn exact_quadratic_is_recovered() {
        let fit = fit_lyapunov(&exact_samples()).unwrap();
        for (c, e) in fit.coeffs.iter().zip([1.0, 0.0, 1.0, 0.0, 0.0]) {
            assert!((c - e).abs() < 1e-8);
        }
        assert_eq!(fit.value(0.0, 0.0), 0.0);
    }

    #[test]
    fn all_converged_takes_the_largest_value() {
        let s = exact_samples();
        let fit = fit_lyapunov(&s).unwrap();
        let c = level_set(&fit, &s).unwrap();
        let max = s.iter().map(|x| fit.value(x.theta0, x.theta_dot0)).fold(f64::MIN, f64::max);
        assert_eq!(c, max);
    }

    #[test]
    fn boundary_points_lie_on_the_level_curve() {
        let fit = LyapunovFit { coeffs: [2.0, 0.5, 1.0, 0.1, -0.2], r2: 1.0 };
        for (t, td) in fit.level_curve(0.7, 24).unwrap() {
            assert!((fit.value(t, td) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn box_level_touches_the_nearest_side() {
        // V = t^2 + td^2 / 4 inside [-1, 1] x [-1, 1]: the td-extent is 2 sqrt(c)
        let fit = LyapunovFit { coeffs: [1.0, 0.0, 0.25, 0.0, 0.0], r2: 1.0 };
        let c = fit.box_level((-1.0, 1.0), (-1.0, 1.0)).unwrap();
        assert!((c - 0.25).abs() < 1e-12);
        let pts = fit.level_curve(c, 64).unwrap();
        assert!(pts.iter().all(|(t, td)| t.abs() <= 1.0 + 1e-9 && td.abs() <= 1.0 + 1e-9));
        assert!(fit.box_level((0.5, 1.0), (-1.0, 1.0)).is_none());
    }

    #[test]
    fn indefinite_fit_is_rejected() {
        let s: Vec<LyapunovSample> = sample_grid((-1.0, 1.0), (-1.0, 1.0), 5)
            .unwrap()
            .into_iter()
            .map(|(t, td)| LyapunovSample { theta0: t, theta_dot0: td, v: t * t - td * td, converged: true })
            .collect();
        assert!(matches!(fit_lyapunov(&s), Err(Error::FitQuality(_))));
    }
}

//! Line-search minimizer shared by hyperparameter fitting, policy search and
//! distillation.
//!
//! Every accepted step satisfies the Armijo condition, so the objective trace
//! is strictly decreasing. An objective that returns `Err` at a trial point is
//! treated as `+inf` there and the step is shrunk.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Objective {
    /// Value and gradient at `x`.
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;

    /// Value only. Override when it is much cheaper than the gradient.
    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.evaluate(x).map(|(f, _)| f)
    }
}

/// Adapter turning a closure into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (self.0)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SteepestDescent,
    Lbfgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when `|grad| < grad_tol * (1 + |f|)`.
    pub grad_tol: f64,
    /// Stop when an accepted step lowers `f` by less than this.
    pub ftol: f64,
    pub memory: usize,
    /// Length of the very first trial step.
    pub initial_step: f64,
    /// Upper bound on the length of any trial step.
    pub max_step: f64,
    pub armijo: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::Lbfgs,
            max_iters: 200,
            grad_tol: 1e-6,
            ftol: 0.0,
            memory: 10,
            initial_step: 1.0,
            max_step: f64::INFINITY,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    SmallDecrease,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// No step was ever accepted.
    pub stalled: bool,
}

impl MinimizeResult {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::GradientTolerance | Termination::SmallDecrease)
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimize `obj` from `x0`. Fails only if the starting point itself cannot
/// be evaluated.
pub fn minimize<O: Objective + ?Sized>(
    obj: &mut O,
    x0: DVector<f64>,
    cfg: &MinimizeConfig,
) -> Result<MinimizeResult> {
    let (mut f, mut g) = obj.evaluate(&x0)?;
    if !f.is_finite() || !finite(&g) {
        return Err(Error::Domain("objective is not finite at the starting point".into()));
    }
    let mut x = x0;
    let mut trace = vec![f];
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut prev_alpha = 1.0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        if g.norm() < cfg.grad_tol * (1.0 + f.abs()) {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut d = match cfg.method {
            Method::Lbfgs if !s_hist.is_empty() => two_loop(&g, &s_hist, &y_hist),
            _ => -&g,
        };
        let mut slope = g.dot(&d);
        if slope >= 0.0 || !finite(&d) {
            // quasi-Newton direction lost descent; fall back
            s_hist.clear();
            y_hist.clear();
            d = -&g;
            slope = -g.norm_squared();
        }

        let mut alpha = if s_hist.is_empty() {
            if iterations == 0 {
                cfg.initial_step / d.norm()
            } else {
                // steepest descent: expand the last accepted step
                2.0 * prev_alpha
            }
        } else {
            1.0
        };
        let dn = d.norm();
        if alpha * dn > cfg.max_step {
            alpha = cfg.max_step / dn;
        }

        let mut accepted = None;
        let mut best_decrease = f64::NEG_INFINITY;
        for _ in 0..=cfg.max_backtracks {
            let xt = &x + &d * alpha;
            if let Ok(ft) = obj.value(&xt) {
                if ft.is_finite() {
                    best_decrease = best_decrease.max(f - ft);
                }
                if ft.is_finite() && ft <= f + cfg.armijo * alpha * slope && ft < f {
                    accepted = Some((xt, ft));
                    break;
                }
            }
            alpha *= cfg.shrink;
        }
        let Some((xn, _)) = accepted else {
            // no trial step gains ftol: the decrease test holds without moving
            termination = if cfg.ftol > 0.0 && best_decrease < cfg.ftol {
                Termination::SmallDecrease
            } else {
                Termination::LineSearchFailed
            };
            break;
        };
        let (fn_, gn) = match obj.evaluate(&xn) {
            Ok(v) if v.0.is_finite() && finite(&v.1) => v,
            _ => {
                termination = Termination::LineSearchFailed;
                break;
            }
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > cfg.memory.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let decrease = f - fn_;
        prev_alpha = alpha;
        x = xn;
        f = fn_;
        g = gn;
        trace.push(f);
        iterations += 1;
        if decrease < cfg.ftol {
            termination = Termination::SmallDecrease;
            break;
        }
    }

    Ok(MinimizeResult { x, value: f, gradient: g, trace, iterations, termination, stalled: iterations == 0 })
}

fn two_loop(g: &DVector<f64>, s_hist: &[DVector<f64>], y_hist: &[DVector<f64>]) -> DVector<f64> {
    let k = s_hist.len();
    let mut q = g.clone();
    let mut a = vec![0.0; k];
    let rho: Vec<f64> = (0..k).map(|i| 1.0 / s_hist[i].dot(&y_hist[i])).collect();
    for i in (0..k).rev() {
        a[i] = rho[i] * s_hist[i].dot(&q);
        q -= &y_hist[i] * a[i];
    }
    let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].norm_squared();
    let mut r = q * gamma;
    for i in 0..k {
        let b = rho[i] * y_hist[i].dot(&r);
        r += &s_hist[i] * (a[i] - b);
    }
    -r
}

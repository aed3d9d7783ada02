//! The subcommands. Each reads only the config and its input files and
//! writes only below `<out_dir>/<command>/`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use kldpid::distill::{
    closed_form_gains_with, collect_expert_data, compare_joint_pdfs, minimize_kld, row_states, ExpertData, JointPdfs,
    KldFit, PidController, PidGains, PidStructure,
};
use kldpid::optim::Termination;
use kldpid::plant::{rollout, PlantState, Trajectory};
use kldpid::policy_search::{pilco_loop, write_log_csv, IterationLog, LoopOutcome, PolicyParams};
use kldpid::roa::{estimate_roa, RoaReport};
use kldpid::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::evaluate::{check_policy, evaluate_gains, PolicyCheck, Scenario, ScenarioResult};

/// Independent seeds for the random parts of the pipeline, all derived from
/// the one configured seed.
pub mod stream {
    pub const DISTILL_INIT: u64 = 1;
    pub const POLICY_CHECK: u64 = 2;
    pub const EVALUATE: u64 = 3;
    pub const SIMULATE: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).random()
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    Ok(serde_json::from_str(&read_input(path)?)?)
}

/// Gains from `path`, with the integral block dropped when `zero_integral`.
pub fn load_gains(path: &Path, zero_integral: bool) -> Result<PidGains> {
    let g: PidGains = serde_json::from_str(&read_input(path)?)?;
    Ok(if zero_integral { g.without_integral() } else { g })
}

#[derive(Debug, Clone, Serialize)]
pub struct PilcoSummary {
    pub seed: u64,
    pub iterations: usize,
    pub learned: bool,
    pub final_j_realized: f64,
    pub log: Vec<IterationLog>,
    pub check: PolicyCheck,
}

/// Policy search; writes `policy.json`, `log.csv` and `summary.json`. An
/// aborted loop still writes its partial results before the error returns.
pub fn cmd_pilco(cfg: &ExperimentConfig) -> Result<(LoopOutcome<PolicyParams>, PilcoSummary)> {
    cfg.validate()?;
    let dir = cfg.command_dir("pilco");
    prepare_dir(&dir)?;
    let (mut outcome, _) = pilco_loop(&cfg.plant, &cfg.cost, &cfg.pilco, cfg.seed)?;
    write_json(&dir.join("policy.json"), &outcome.policy)?;
    write_log_csv(&outcome.log, create(&dir.join("log.csv"))?)?;
    let check =
        check_policy(&outcome.policy, &cfg.plant, &cfg.cost, &cfg.policy_check, stream_seed(cfg.seed, stream::POLICY_CHECK))?;
    let summary = PilcoSummary {
        seed: cfg.seed,
        iterations: outcome.log.len() - 1,
        learned: outcome.learned,
        final_j_realized: outcome.log.last().map_or(f64::NAN, |e| e.j_realized),
        log: outcome.log.clone(),
        check,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "policy search: {} iterations, learned {}, pole held in {}/{} test rollouts",
        summary.iterations,
        summary.learned,
        summary.check.held,
        summary.check.trials
    );
    match outcome.abort.take() {
        Some(e) => Err(e),
        None => Ok((outcome, summary)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillSummary {
    pub seed: u64,
    pub rows: usize,
    pub rollouts_kept: usize,
    pub rollouts_dropped: usize,
    pub structure: PidStructure,
    pub integral: bool,
    pub iterations: usize,
    pub termination: Termination,
    pub converged: bool,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// `|K - K_ls| / |K_ls|` against the least-squares gains of the same layout.
    pub closed_form_rel_error: f64,
    pub kld_initial_x: f64,
    pub kld_final_x: f64,
    pub kld_initial_theta: f64,
    pub kld_final_theta: f64,
    pub gains: PidGains,
}

#[derive(Debug)]
pub struct DistillRun {
    pub expert: ExpertData,
    pub initial: PidGains,
    pub fit: KldFit,
    pub closed_form: PidGains,
    pub pdfs_x: JointPdfs,
    pub pdfs_theta: JointPdfs,
    pub summary: DistillSummary,
}

/// Random initial gains for the configured layout.
pub fn initial_gains(cfg: &ExperimentConfig, zero_integral: bool) -> Result<PidGains> {
    let mut rng = stream_rng(cfg.seed, stream::DISTILL_INIT);
    let sigma = cfg.distill.fit.sigma_fraction * cfg.plant.u_max;
    let g = PidGains::random(cfg.distill.structure, 1, &cfg.expert.channels, sigma, &mut rng)?;
    let g = g.with_free(&(g.free() * cfg.distill.init_std));
    Ok(if zero_integral { g.without_integral() } else { g })
}

/// Expert data from `policy`, the KL fit, the least-squares reference and
/// the joint densities; writes `gains.json`, `trace.csv`, the six density
/// grids and `summary.json`.
pub fn cmd_distill(cfg: &ExperimentConfig, policy: &Path, zero_integral: bool) -> Result<DistillRun> {
    cfg.validate()?;
    let policy = load_policy(policy)?;
    let dir = cfg.command_dir("distill");
    prepare_dir(&dir)?;
    let expert = collect_expert_data(&cfg.plant, |s| policy.eval(s), &cfg.expert, cfg.seed)?;
    let data = &expert.dataset;
    let initial = initial_gains(cfg, zero_integral)?;
    let fit = minimize_kld(data, &initial, &cfg.distill.fit)?;
    let closed_form = closed_form_gains_with(data, cfg.distill.structure, !zero_integral)?;
    let rel = (&fit.gains.k - &closed_form.k).norm() / closed_form.k.norm().max(f64::MIN_POSITIVE);

    fit.gains.save_json(&dir.join("gains.json"))?;
    let mut w = csv::Writer::from_writer(create(&dir.join("trace.csv"))?);
    w.write_record(["iter", "objective"])?;
    for (i, v) in fit.trace.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;

    let u_max = cfg.plant.u_max;
    let cells = cfg.distill.kde_cells;
    let mut pdfs = Vec::new();
    for (name, index) in [("x", 0), ("theta", 2)] {
        let states = row_states(&expert.trajectories, index);
        let p = compare_joint_pdfs(data, &states, &initial, &fit.gains, u_max, cells)?;
        for (which, grid) in [("expert", &p.expert), ("initial", &p.initial), ("final", &p.fitted)] {
            grid.write_csv(create(&dir.join(format!("density_{which}_{name}.csv")))?, "u", name)?;
        }
        pdfs.push(p);
    }
    let pdfs_theta = pdfs.pop().expect("two grids");
    let pdfs_x = pdfs.pop().expect("two grids");

    let summary = DistillSummary {
        seed: cfg.seed,
        rows: data.rows(),
        rollouts_kept: expert.trajectories.len(),
        rollouts_dropped: expert.dropped,
        structure: cfg.distill.structure,
        integral: !zero_integral,
        iterations: fit.iterations,
        termination: fit.termination,
        converged: fit.converged(),
        initial_objective: fit.trace[0],
        final_objective: *fit.trace.last().expect("trace holds the start"),
        closed_form_rel_error: rel,
        kld_initial_x: pdfs_x.kld_initial,
        kld_final_x: pdfs_x.kld_fitted,
        kld_initial_theta: pdfs_theta.kld_initial,
        kld_final_theta: pdfs_theta.kld_fitted,
        gains: fit.gains.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "distilled in {} iterations ({:?}); KLD x {:.4} -> {:.4}, theta {:.4} -> {:.4}",
        fit.iterations,
        fit.termination,
        summary.kld_initial_x,
        summary.kld_final_x,
        summary.kld_initial_theta,
        summary.kld_final_theta
    );
    Ok(DistillRun { expert, initial, fit, closed_form, pdfs_x, pdfs_theta, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub seed: u64,
    pub noise: bool,
    pub tolerance: f64,
    pub tail: f64,
    pub recovery_window: f64,
    pub results: Vec<ScenarioResult>,
}

/// Closed-loop scenarios; writes one trajectory CSV per run and `summary.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, gains: &PidGains, scenario: Scenario) -> Result<EvaluateSummary> {
    cfg.validate()?;
    let dir = cfg.command_dir("evaluate");
    prepare_dir(&dir)?;
    let ev = &cfg.evaluate;
    let results =
        evaluate_gains(gains, &cfg.plant, &cfg.expert.x_des, ev, scenario, stream_seed(cfg.seed, stream::EVALUATE))?;
    for r in &results {
        if let Some(t) = &r.trajectory {
            t.write_csv(create(&dir.join(format!("{}.csv", r.name)))?)?;
        }
        log::info!(
            "{}: settling {:?} s, peak {:.4}, converged {}, recovered {}",
            r.name,
            r.metrics.settling_time,
            r.metrics.peak_deviation,
            r.metrics.converged,
            r.metrics.recovered
        );
    }
    let summary = EvaluateSummary {
        seed: cfg.seed,
        noise: ev.noise,
        tolerance: ev.tolerance,
        tail: ev.tail,
        recovery_window: ev.recovery_window,
        results,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// ROA estimate and boundary verification; writes `grid.csv`,
/// `summary.json` and `boundary/point_NN.csv`.
pub fn cmd_roa(cfg: &ExperimentConfig, gains: &PidGains) -> Result<RoaReport> {
    cfg.validate()?;
    let dir = cfg.command_dir("roa");
    prepare_dir(&dir.join("boundary"))?;
    let ctrl = PidController::new(gains.clone(), cfg.expert.x_des, cfg.plant.dt, cfg.plant.u_max);
    let report = estimate_roa(&cfg.plant, &ctrl, &cfg.roa)?;
    report.write_grid_csv(create(&dir.join("grid.csv"))?)?;
    write_json(&dir.join("summary.json"), &report.summary())?;
    for (i, t) in report.verification.trajectories.iter().enumerate() {
        if let Some(t) = t {
            t.write_csv(create(&dir.join("boundary").join(format!("point_{i:02}.csv")))?)?;
        }
    }
    log::info!(
        "ROA c* = {:.4} (R^2 {:.3}); boundary converged fraction {}",
        report.c_star,
        report.fit.r2,
        report.verification.fraction_converged()
    );
    Ok(report)
}

/// Controller driving a raw rollout.
#[derive(Debug, Clone)]
pub enum Controller {
    Policy(PolicyParams),
    Pid(PidGains),
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub seed: u64,
    pub controller: &'static str,
    pub steps: usize,
    pub final_state: Option<PlantState>,
    pub max_abs_theta: Option<f64>,
    pub diverged_at: Option<usize>,
}

/// One rollout from the configured initial state; writes `trajectory.csv`
/// and `summary.json`.
pub fn cmd_simulate(cfg: &ExperimentConfig, controller: &Controller) -> Result<(Option<Trajectory>, SimulateSummary)> {
    cfg.validate()?;
    let dir = cfg.command_dir("simulate");
    prepare_dir(&dir)?;
    let sim = &cfg.simulate;
    let params = if sim.noise { cfg.plant.clone() } else { cfg.plant.noiseless() };
    let horizon = sim.horizon(params.dt);
    let seed = stream_seed(cfg.seed, stream::SIMULATE);
    let (name, result) = match controller {
        Controller::Policy(p) => ("policy", rollout(|s| p.eval(s), sim.initial_state, horizon, &params, sim.disturbance.as_ref(), seed)),
        Controller::Pid(g) => {
            let mut c = PidController::new(g.clone(), cfg.expert.x_des, params.dt, params.u_max);
            ("pid", rollout(|s| c.control(s), sim.initial_state, horizon, &params, sim.disturbance.as_ref(), seed))
        }
    };
    let (traj, diverged_at) = match result {
        Ok(t) => (Some(t), None),
        Err(Error::Divergence { step, .. }) => (None, Some(step)),
        Err(e) => return Err(e),
    };
    if let Some(t) = &traj {
        t.write_csv(create(&dir.join("trajectory.csv"))?)?;
    }
    let summary = SimulateSummary {
        seed: cfg.seed,
        controller: name,
        steps: horizon,
        final_state: traj.as_ref().map(|t| *t.final_state()),
        max_abs_theta: traj.as_ref().map(|t| t.states.iter().map(|s| s.theta.abs()).fold(0.0, f64::max)),
        diverged_at,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((traj, summary))
}

/// Default input locations: each command reads what the previous one wrote.
pub fn default_policy_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.command_dir("pilco").join("policy.json")
}

pub fn default_gains_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.command_dir("distill").join("gains.json")
}

//! Command-line harness: a TOML experiment manifest, seeded end-to-end
//! pipelines (policy search, distillation, closed-loop evaluation, ROA) and
//! CSV/JSON outputs for plotting.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod evaluate;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use kldpid::{Error, Result};
use serde::Serialize;

pub use commands::*;
pub use config::*;
pub use evaluate::*;

#[derive(Debug, Parser)]
#[command(name = "kldpid", version, about = "Policy search, PID distillation and ROA experiments on the cart-pole")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// PD mode: fit, or run, the gains without the integral block.
    #[arg(long, global = true)]
    pub zero_integral: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the full default config.
    InitConfig {
        /// Destination; stdout when omitted.
        path: Option<PathBuf>,
    },
    /// Model-based policy search.
    Pilco,
    /// Distill PID gains from a learned policy.
    Distill {
        /// Policy checkpoint; defaults to the pilco output.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Closed-loop scenarios with distilled gains.
    Evaluate {
        /// Gains file; defaults to the distill output.
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        scenario: Scenario,
        /// Matched impulse magnitude (N), overriding the config.
        #[arg(long)]
        matched_impulse: Option<f64>,
        /// Unmatched impulse magnitude (N m), overriding the config.
        #[arg(long)]
        unmatched_impulse: Option<f64>,
    },
    /// Region-of-attraction estimate and boundary verification.
    Roa {
        #[arg(long)]
        gains: Option<PathBuf>,
    },
    /// One raw rollout with a policy or with PID gains.
    Simulate {
        /// Drive the plant with this policy checkpoint.
        #[arg(long, conflicts_with = "gains")]
        policy: Option<PathBuf>,
        /// Drive the plant with these gains (the default, from the distill output).
        #[arg(long)]
        gains: Option<PathBuf>,
    },
}

/// Machine-readable failure record.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub numerical: bool,
}

impl ErrorRecord {
    pub fn new(e: &Error) -> Self {
        Self { error: e.kind(), message: e.to_string(), numerical: e.is_numerical() }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::InitConfig { .. } => "init-config",
        Command::Pilco => "pilco",
        Command::Distill { .. } => "distill",
        Command::Evaluate { .. } => "evaluate",
        Command::Roa { .. } => "roa",
        Command::Simulate { .. } => "simulate",
    }
}

/// Config file (or defaults) with the command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.zero_integral {
        cfg.distill.zero_integral = true;
    }
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

pub fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let pd = cfg.distill.zero_integral;
    match &cli.command {
        Command::InitConfig { path } => {
            let text = cfg.to_toml()?;
            match path {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Pilco => {
            cmd_pilco(cfg)?;
        }
        Command::Distill { policy } => {
            cmd_distill(cfg, &or_default(policy, default_policy_path(cfg)), pd)?;
        }
        Command::Evaluate { gains, scenario, matched_impulse, unmatched_impulse } => {
            let g = load_gains(&or_default(gains, default_gains_path(cfg)), pd)?;
            let mut cfg = cfg.clone();
            if let Some(m) = matched_impulse {
                cfg.evaluate.matched.magnitude = *m;
            }
            if let Some(m) = unmatched_impulse {
                cfg.evaluate.unmatched.magnitude = *m;
            }
            cmd_evaluate(&cfg, &g, *scenario)?;
        }
        Command::Roa { gains } => {
            let g = load_gains(&or_default(gains, default_gains_path(cfg)), pd)?;
            cmd_roa(cfg, &g)?;
        }
        Command::Simulate { policy, gains } => {
            let controller = match policy {
                Some(p) => Controller::Policy(load_policy(p)?),
                None => Controller::Pid(load_gains(&or_default(gains, default_gains_path(cfg)), pd)?),
            };
            cmd_simulate(cfg, &controller)?;
        }
    }
    Ok(())
}

fn report(e: &Error, dir: Option<&Path>) {
    let record = ErrorRecord::new(e);
    let json = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", record.error));
    eprintln!("{json}");
    if let Some(dir) = dir {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = write_json(&dir.join("error.json"), &record);
        }
    }
}

/// Parse, run and map the outcome to an exit code: 0 success, 1 usage,
/// config or I/O error, 2 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report(&e, None);
            return exit_code(&e);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            let dir = match cli.command {
                Command::InitConfig { .. } => None,
                ref c => Some(cfg.command_dir(command_name(c))),
            };
            report(&e, dir.as_deref());
            exit_code(&e)
        }
    }
}

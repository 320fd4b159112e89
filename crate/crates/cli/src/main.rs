//! `tiltrotor`: run the built-in scenarios and compare controllers.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use tiltrotor_core::config::{load_config, RunConfig};
use tiltrotor_core::output::{comparison_table, write_trace_csv, RunSummary};
use tiltrotor_core::sim::{compute_metrics, run_scenario, ControllerKind, EpisodeTrace, ScenarioKind};

#[derive(Parser)]
#[command(name = "tiltrotor", version, about = "Closed-loop simulation of a tiltrotor quadrotor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one controller and write trace.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// nmpc, lqr or smc.
        #[arg(long, value_parser = parse_controller)]
        controller: Option<ControllerKind>,
    },
    /// Run all three controllers on the same scenario and print a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// sluggish, agile, hover-attitude or custom.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioKind>,
    /// TOML configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disturbance phase seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Episode length, s.
    #[arg(long)]
    duration: Option<f64>,
    /// Simulation and control period, s.
    #[arg(long)]
    dt: Option<f64>,
    /// Write measured controller times into trace.csv.
    #[arg(long)]
    record_timing: bool,
}

fn usage_message(e: tiltrotor_core::Error) -> String {
    match e {
        tiltrotor_core::Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(usage_message)
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse().map_err(usage_message)
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.scenario {
            config.scenario = s;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.duration.is_some() {
            config.duration = self.duration;
        }
        if let Some(dt) = self.dt {
            config.dt = dt;
        }
        config.record_timing |= self.record_timing;
        config.validate()?;
        Ok(config)
    }
}

struct Outcome {
    trace: EpisodeTrace,
    summary: RunSummary,
}

/// Runs the episode described by `config` and writes its files into `dir`.
fn execute(config: &RunConfig, dir: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let trace = run_scenario(
        &config.scenario(),
        config.controller,
        &config.controllers(),
        &config.vehicle,
        &config.limits,
        config.dt,
        config.seed,
    )?;
    let metrics = compute_metrics(&trace)?;
    let summary = RunSummary::new(&trace, metrics, config);
    let csv = dir.join("trace.csv");
    write_trace_csv(&csv, &trace, config.record_timing).with_context(|| format!("cannot write {}", csv.display()))?;
    let json = dir.join("summary.json");
    summary.write(&json).with_context(|| format!("cannot write {}", json.display()))?;
    Ok(Outcome { trace, summary })
}

fn run_command(mut config: RunConfig, controller: Option<ControllerKind>) -> Result<()> {
    if let Some(c) = controller {
        config.controller = c;
    }
    let dir = config.output_dir.clone();
    let outcome = execute(&config, &dir)?;
    let rows = [(config.controller, outcome.summary.metrics.clone(), outcome.summary.complete)];
    print!("{}", comparison_table(&rows));
    println!("wrote {}", dir.display());
    if let Some(abort) = &outcome.trace.abort {
        bail!("simulation aborted at t = {:.3} s: {}", abort.time, abort.reason);
    }
    Ok(())
}

/// Runs the three controllers in parallel; each writes into its own
/// subdirectory. Aborted episodes are reported in the table.
fn compare(config: RunConfig) -> Result<()> {
    let results: Vec<Result<Outcome>> = thread::scope(|s| {
        let handles: Vec<_> = ControllerKind::ALL
            .into_iter()
            .map(|kind| {
                let config = RunConfig { controller: kind, ..config.clone() };
                let dir = config.output_dir.join(kind.name());
                s.spawn(move || execute(&config, &dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("episode thread panicked")).collect()
    });
    let mut rows = Vec::new();
    for (kind, result) in ControllerKind::ALL.into_iter().zip(results) {
        let outcome = result.with_context(|| format!("{kind} run failed"))?;
        rows.push((kind, outcome.summary.metrics, outcome.summary.complete));
    }
    let table = comparison_table(&rows);
    print!("{table}");
    std::fs::write(config.output_dir.join("comparison.txt"), &table)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common, controller } => common.resolve().and_then(|c| run_command(c, controller)),
        Command::Compare { common } => common.resolve().and_then(compare),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

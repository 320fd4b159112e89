//! Trace CSV and run summary JSON.
//!
//! Floats are written with 17 significant digits so that parsing a trace
//! reproduces the recorded values bit for bit. Controller wall times are
//! written as zero unless requested, which keeps traces of identical runs
//! byte-identical.

use crate::config::RunConfig;
use crate::linalg::{Vector12, Vector6, Vector8};
use crate::sim::{ControllerKind, EpisodeTrace, MetricsSummary, StepRecord};
use crate::{Error, Result, VERSION};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

const STATE_COLUMNS: [&str; 12] = [
    "x [m]",
    "y [m]",
    "z [m]",
    "phi [rad]",
    "theta [rad]",
    "psi [rad]",
    "vx [m/s]",
    "vy [m/s]",
    "vz [m/s]",
    "p [rad/s]",
    "q [rad/s]",
    "r [rad/s]",
];
const WRENCH_COLUMNS: [&str; 6] = ["fx [N]", "fy [N]", "fz [N]", "tx [N m]", "ty [N m]", "tz [N m]"];
const COMMAND_COLUMNS: [&str; 8] = [
    "omega1 [rpm]",
    "omega2 [rpm]",
    "omega3 [rpm]",
    "omega4 [rpm]",
    "beta1 [rad]",
    "beta2 [rad]",
    "beta3 [rad]",
    "beta4 [rad]",
];

/// Number of columns of `trace.csv`.
pub const CSV_COLUMNS: usize = 1 + 12 + 12 + 6 + 8 + 8 + 6 + 3;

/// Header row of `trace.csv`.
pub fn csv_header() -> Vec<String> {
    let mut h = vec!["t [s]".to_string()];
    h.extend(STATE_COLUMNS.iter().map(|c| c.to_string()));
    h.extend(STATE_COLUMNS.iter().map(|c| format!("ref_{c}")));
    h.extend(WRENCH_COLUMNS.iter().map(|c| format!("v_{c}")));
    h.extend(COMMAND_COLUMNS.iter().map(|c| format!("cmd_{c}")));
    h.extend(COMMAND_COLUMNS.iter().map(|c| format!("real_{c}")));
    h.extend(WRENCH_COLUMNS.iter().map(|c| format!("dist_{c}")));
    h.extend(["sqp_iters [-]", "kkt_residual [-]", "solve_ms [ms]"].map(String::from));
    h
}

fn push_float(line: &mut String, x: f64) {
    let _ = write!(line, ",{x:.16e}");
}

/// Renders a trace as CSV. `timing` selects whether measured controller
/// times are written.
pub fn trace_to_csv(trace: &EpisodeTrace, timing: bool) -> String {
    let mut out = csv_header().join(",");
    out.push('\n');
    for r in &trace.records {
        let mut line = format!("{:.16e}", r.t);
        let columns = r.state.iter().chain(&r.reference).chain(&r.wrench).chain(&r.command).chain(&r.realized);
        for x in columns.chain(&r.disturbance) {
            push_float(&mut line, *x);
        }
        let _ = write!(line, ",{}", r.sqp_iterations);
        push_float(&mut line, r.kkt_residual);
        push_float(&mut line, if timing { r.solve_time * 1e3 } else { 0.0 });
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &EpisodeTrace, timing: bool) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(trace_to_csv(trace, timing).as_bytes())?;
    file.flush()?;
    Ok(())
}

/// Parses `trace.csv` back into step records. The stage-0 residual is not
/// part of the file and reads as zero.
pub fn parse_trace_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("trace.csv: missing header".into()))?;
    if header.split(',').map(str::to_string).collect::<Vec<_>>() != csv_header() {
        return Err(Error::Config("trace.csv: unexpected header".into()));
    }
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = n + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS {
            return Err(Error::Config(format!(
                "trace.csv line {row}: expected {CSV_COLUMNS} fields, got {}",
                fields.len()
            )));
        }
        let float = |k: usize| -> Result<f64> {
            fields[k].parse().map_err(|_| {
                Error::Config(format!("trace.csv line {row}, column {}: invalid number '{}'", k + 1, fields[k]))
            })
        };
        let block = |start: usize, len: usize| -> Result<Vec<f64>> { (start..start + len).map(float).collect() };
        let sqp_iterations = fields[CSV_COLUMNS - 3]
            .parse()
            .map_err(|_| Error::Config(format!("trace.csv line {row}: invalid iteration count")))?;
        records.push(StepRecord {
            t: float(0)?,
            state: Vector12::from_vec(block(1, 12)?),
            reference: Vector12::from_vec(block(13, 12)?),
            wrench: Vector6::from_vec(block(25, 6)?),
            command: Vector8::from_vec(block(31, 8)?),
            realized: Vector8::from_vec(block(39, 8)?),
            disturbance: Vector6::from_vec(block(47, 6)?),
            sqp_iterations,
            kkt_residual: float(CSV_COLUMNS - 2)?,
            solve_time: float(CSV_COLUMNS - 1)? * 1e-3,
            constraint_residual: 0.0,
        });
    }
    Ok(records)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub scenario: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub complete: bool,
    /// Reason the episode stopped early, if it did.
    pub abort: Option<String>,
    pub metrics: MetricsSummary,
    /// Unit of every metric field.
    pub units: BTreeMap<String, String>,
    pub config: RunConfig,
}

fn metric_units() -> BTreeMap<String, String> {
    [
        ("samples", "-"),
        ("duration", "s"),
        ("position_rmse", "m"),
        ("position_rmse_total", "m"),
        ("attitude_rmse", "rad"),
        ("attitude_rmse_total", "rad"),
        ("position_max_abs", "m"),
        ("attitude_max_abs", "rad"),
        ("position_steady_state", "m"),
        ("attitude_steady_state", "rad"),
        ("saturation_fraction", "-"),
        ("solve_time_mean", "s"),
        ("solve_time_max", "s"),
        ("solve_time_p99", "s"),
        ("control_effort", "N^2 s"),
    ]
    .into_iter()
    .map(|(k, u)| (k.to_string(), u.to_string()))
    .collect()
}

impl RunSummary {
    pub fn new(trace: &EpisodeTrace, metrics: MetricsSummary, config: &RunConfig) -> Self {
        Self {
            version: VERSION.to_string(),
            scenario: trace.scenario.clone(),
            controller: trace.controller,
            seed: config.seed,
            complete: trace.is_complete(),
            abort: trace.abort.as_ref().map(|a| format!("t = {:.3} s: {}", a.time, a.reason)),
            metrics,
            units: metric_units(),
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Plain-text table of the headline metrics, one row per controller.
pub fn comparison_table(rows: &[(ControllerKind, MetricsSummary, bool)]) -> String {
    let mut out = format!(
        "{:<6} {:>10} {:>10} {:>10} {:>12} {:>8} {:>10} {:>9} {:>9} {:>8}\n",
        "ctrl",
        "pos [m]",
        "att [deg]",
        "ss pos [m]",
        "ss att [deg]",
        "sat",
        "effort",
        "mean [ms]",
        "p99 [ms]",
        "complete"
    );
    for (kind, m, complete) in rows {
        let ss_pos = m.position_steady_state.iter().fold(0.0f64, |a, b| a.max(*b));
        let ss_att = m.attitude_steady_state.iter().fold(0.0f64, |a, b| a.max(*b));
        let _ = writeln!(
            out,
            "{:<6} {:>10.4} {:>10.3} {:>10.4} {:>12.3} {:>8.4} {:>10.1} {:>9.3} {:>9.3} {:>8}",
            kind.name(),
            m.position_rmse_total,
            m.attitude_rmse_total.to_degrees(),
            ss_pos,
            ss_att.to_degrees(),
            m.saturation_fraction,
            m.control_effort,
            m.solve_time_mean * 1e3,
            m.solve_time_p99 * 1e3,
            if *complete { "yes" } else { "no" },
        );
    }
    out
}

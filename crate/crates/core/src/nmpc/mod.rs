//! Feasibility-constrained nonlinear MPC.
//!
//! The optimizer works directly on the 6-dimensional wrench and constrains
//! the allocated actuator command `h(v)` at every stage to the window the
//! actuators can reach from their current state. Each control step solves the
//! horizon problem with a Gauss-Newton SQP over a multiple-shooting
//! transcription; every QP subproblem is condensed onto the wrench increments
//! and solved by the dense active-set solver in [`qp`].

mod constraints;
pub mod qp;
mod sqp;

pub use sqp::{
    build_stage_bounds, controller_step, discretize_dynamics, effort_reference, linearize_h, nmpc_solve,
    Discretization, NmpcController, StepOutput,
};

use crate::linalg::{Vector12, Vector6, Vector8};
use crate::{Error, Result};
use qp::QpStatus;
use serde::{Deserialize, Serialize};

/// What the effort term of the running cost penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffortReference {
    /// Deviation from the wrench that holds the reference trajectory
    /// (gravity, drag and reference acceleration compensated, zero torque).
    Trim,
    /// The absolute wrench.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmpcConfig {
    pub horizon: usize,
    /// Control period, s.
    pub dt: f64,
    /// Diagonal of `Q_x` in state order (position, attitude, velocity, body rate).
    pub state_weights: [f64; 12],
    /// Diagonal of `Q_v` (force, torque).
    pub input_weights: [f64; 6],
    pub max_sqp_iterations: usize,
    pub step_tolerance: f64,
    pub constraint_tolerance: f64,
    pub effort_reference: EffortReference,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            dt: 0.02,
            state_weights: [0.04, 0.04, 0.04, 8.0, 8.0, 8.0, 1.0, 1.0, 4.0, 65.0, 65.0, 70.0],
            input_weights: [5e-4; 6],
            max_sqp_iterations: 10,
            step_tolerance: 1e-6,
            constraint_tolerance: 1e-6,
            effort_reference: EffortReference::Trim,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(format!("nmpc: {msg}")));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.state_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("state weights must be nonnegative");
        }
        if self.input_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("input weights must be positive");
        }
        if self.step_tolerance.is_nan()
            || self.step_tolerance <= 0.0
            || self.constraint_tolerance.is_nan()
            || self.constraint_tolerance <= 0.0
        {
            return bad("tolerances must be positive");
        }
        Ok(())
    }
}

/// Per-stage actuator command bounds `[rpm x4, rad x4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBounds {
    pub lower: Vec<Vector8>,
    pub upper: Vec<Vector8>,
}

impl StageBounds {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Largest bound violation of `u` at `stage` (0 when inside).
    pub fn violation(&self, stage: usize, u: &Vector8) -> f64 {
        (0..8).fold(0.0_f64, |acc, c| acc.max(self.lower[stage][c] - u[c]).max(u[c] - self.upper[stage][c]))
    }

    /// `u` clamped into the bounds of `stage`.
    pub fn clamp(&self, stage: usize, u: &Vector8) -> Vector8 {
        Vector8::from_fn(|c, _| u[c].max(self.lower[stage][c]).min(self.upper[stage][c]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Step norm fell below tolerance with constraints satisfied.
    Converged,
    /// Iteration cap reached.
    IterationLimit,
    /// No step along the search direction decreased the merit function.
    Stalled,
    /// No usable iterate; the caller must hold its previous command.
    Failed,
}

/// Merit (cost plus penalty times the l1 norm of defects and bound violations)
/// before and after one accepted SQP step, at that step's penalty weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostics {
    pub status: SolveStatus,
    pub sqp_iterations: usize,
    /// KKT residual of the last QP subproblem.
    pub kkt_residual: f64,
    pub qp_status: QpStatus,
    pub active_set_size: usize,
    /// Whether the last QP needed the relaxed (slack) formulation.
    pub relaxed: bool,
    /// One entry per accepted SQP step.
    pub merit_history: Vec<MeritStep>,
    /// Exact-penalty weight in force at the end of the solve.
    pub penalty: f64,
    /// Whether the first-stage wrench was projected back onto its bounds after
    /// the SQP iterations.
    pub restored: bool,
    /// Largest bound violation of `h(v(i))` over all stages.
    pub constraint_residual: f64,
    /// Sum of absolute shooting defects of the final iterate before the rollout.
    pub defect_residual: f64,
}

/// Optimized horizon: wrenches `v(0..N-1)`, predicted states `x(1..N)` and the
/// commands `h(v(i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub controls: Vec<Vector6>,
    pub states: Vec<Vector12>,
    pub commands: Vec<Vector8>,
    pub bounds: StageBounds,
    pub diagnostics: SolverDiagnostics,
}

impl HorizonSolution {
    /// Initial guess for the next control step: everything moves one stage
    /// forward and the last stage is duplicated.
    pub fn shifted(&self) -> HorizonSolution {
        fn shift<T: Clone>(v: &[T]) -> Vec<T> {
            let mut out: Vec<T> = v.iter().skip(1).cloned().collect();
            if let Some(last) = v.last() {
                out.push(last.clone());
            }
            out
        }
        HorizonSolution {
            controls: shift(&self.controls),
            states: shift(&self.states),
            commands: shift(&self.commands),
            bounds: self.bounds.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

use super::reference::{agile_period, HoverAttitudeSchedule, Reference, SLUGGISH_PERIOD};
use crate::allocator::Allocator;
use crate::baseline::{LqrConfig, LqrController, SmcConfig, SmcController};
use crate::linalg::{Vector12, Vector6, Vector8};
use crate::nmpc::{NmpcConfig, NmpcController};
use crate::vehicle::{
    apply_actuator_limits, composite_disturbance, propulsive_wrench, step_rk4, ActuatorCommand, ActuatorLimits,
    DisturbanceConfig, VehicleParams, VehicleState, VirtualControl,
};
use crate::{Error, Result};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Sluggish,
    Agile,
    HoverAttitude,
    Custom,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] =
        [ScenarioKind::Sluggish, ScenarioKind::Agile, ScenarioKind::HoverAttitude, ScenarioKind::Custom];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Sluggish => "sluggish",
            ScenarioKind::Agile => "agile",
            ScenarioKind::HoverAttitude => "hover-attitude",
            ScenarioKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown scenario '{s}' (expected sluggish, agile, hover-attitude or custom)"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Nmpc,
    Lqr,
    Smc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Nmpc, ControllerKind::Lqr, ControllerKind::Smc];

    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::Lqr => "lqr",
            ControllerKind::Smc => "smc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller '{s}' (expected nmpc, lqr or smc)")))
    }
}

/// Reference, disturbance and initial condition of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub reference: Reference,
    pub disturbance: DisturbanceConfig,
    pub initial_state: VehicleState,
}

impl Scenario {
    /// Slow lemniscate, no disturbance, 60 s.
    pub fn sluggish() -> Self {
        Self::lemniscate("sluggish", SLUGGISH_PERIOD, 60.0, DisturbanceConfig::default())
    }

    /// Lemniscate with 5 m/s^2 peak acceleration under disturbance, 30 s.
    pub fn agile() -> Self {
        Self::lemniscate("agile", agile_period(), 30.0, DisturbanceConfig::enabled())
    }

    fn lemniscate(name: &str, period: f64, duration: f64, disturbance: DisturbanceConfig) -> Self {
        let reference = Reference::Lemniscate { amplitude_x: 4.0, amplitude_y: 1.0, period, altitude: -4.0 };
        let start = reference.sample(0.0).position;
        Self { name: name.into(), duration, reference, disturbance, initial_state: VehicleState::at_rest(start) }
    }

    /// Transit from the origin, hold and attitude set-points under disturbance, 70 s.
    pub fn hover_attitude() -> Self {
        Self {
            name: "hover-attitude".into(),
            duration: 70.0,
            reference: Reference::HoverAttitude(HoverAttitudeSchedule::default()),
            disturbance: DisturbanceConfig::enabled(),
            initial_state: VehicleState::at_rest(Vector3::zeros()),
        }
    }

    /// Hold at a point, starting there at rest, no disturbance.
    pub fn hold(position: Vector3<f64>, duration: f64) -> Self {
        Self {
            name: "custom".into(),
            duration,
            reference: Reference::Hold { position: position.into(), attitude: [0.0; 3] },
            disturbance: DisturbanceConfig::default(),
            initial_state: VehicleState::at_rest(position),
        }
    }

    pub fn builtin(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::Sluggish => Self::sluggish(),
            ScenarioKind::Agile => Self::agile(),
            ScenarioKind::HoverAttitude => Self::hover_attitude(),
            ScenarioKind::Custom => Self::hold(Vector3::new(0.0, 0.0, -4.0), 10.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("scenario duration must be positive, got {}", self.duration)));
        }
        if !self.initial_state.is_finite() {
            return Err(Error::InvalidParameter("scenario initial state is not finite".into()));
        }
        Ok(())
    }
}

/// Disturbance phases for a seed: 0 keeps the configured phases, any other
/// seed draws every phase uniformly from `[0, 2 pi)`.
pub fn seeded_disturbance(config: &DisturbanceConfig, seed: u64) -> DisturbanceConfig {
    if seed == 0 {
        return *config;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = *config;
    for p in out.force_phase.iter_mut().chain(out.torque_phase.iter_mut()) {
        *p = rng.gen_range(0.0..2.0 * PI);
    }
    out
}

/// Controller tunings for all three controllers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSettings {
    pub nmpc: NmpcConfig,
    pub lqr: LqrConfig,
    pub smc: SmcConfig,
}

/// A controller instance owned by one episode.
#[derive(Debug, Clone)]
pub enum Controller {
    Nmpc(Box<NmpcController>),
    Lqr(LqrController),
    Smc(SmcController),
}

impl Controller {
    /// Builds the controller; the NMPC control period is set to `dt`.
    pub fn new(
        kind: ControllerKind,
        settings: &ControllerSettings,
        params: &VehicleParams,
        limits: &ActuatorLimits,
        dt: f64,
    ) -> Result<Self> {
        Ok(match kind {
            ControllerKind::Nmpc => {
                let config = NmpcConfig { dt, ..settings.nmpc.clone() };
                Controller::Nmpc(Box::new(NmpcController::new(config, *limits, params)?))
            }
            ControllerKind::Lqr => Controller::Lqr(LqrController::new(&settings.lqr, params, dt)?),
            ControllerKind::Smc => Controller::Smc(SmcController::new(&settings.smc, params)?),
        })
    }

    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::Nmpc(_) => ControllerKind::Nmpc,
            Controller::Lqr(_) => ControllerKind::Lqr,
            Controller::Smc(_) => ControllerKind::Smc,
        }
    }
}

/// One row of the episode trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub state: Vector12,
    pub reference: Vector12,
    pub wrench: Vector6,
    pub command: Vector8,
    pub realized: Vector8,
    pub disturbance: Vector6,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    /// Controller wall time, s.
    pub solve_time: f64,
    /// Stage-0 bound violation of the NMPC command before projection (0 for baselines).
    pub constraint_residual: f64,
}

impl StepRecord {
    pub fn saturated(&self) -> bool {
        self.command != self.realized
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Abort {
    pub time: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub scenario: String,
    pub controller: ControllerKind,
    pub dt: f64,
    pub duration: f64,
    pub records: Vec<StepRecord>,
    pub abort: Option<Abort>,
}

impl EpisodeTrace {
    pub fn is_complete(&self) -> bool {
        self.abort.is_none()
    }
}

/// Runs one closed-loop episode on a uniform grid of `round(duration / dt) + 1`
/// samples. The actuators start at the hover command.
///
/// A non-finite state or a singular attitude stops the episode; the trace up
/// to that point is returned with [`EpisodeTrace::abort`] set.
pub fn run_episode(
    scenario: &Scenario,
    controller: &mut Controller,
    params: &VehicleParams,
    limits: &ActuatorLimits,
    dt: f64,
    seed: u64,
) -> Result<EpisodeTrace> {
    scenario.validate()?;
    params.validate()?;
    limits.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let allocator = Allocator::new(params)?;
    let disturbance = seeded_disturbance(&scenario.disturbance, seed);
    let steps = (scenario.duration / dt).round() as usize;
    let horizon = match controller {
        Controller::Nmpc(c) => c.config().horizon,
        _ => 0,
    };
    if let Controller::Nmpc(c) = controller {
        c.reset();
    }

    let mut trace = EpisodeTrace {
        scenario: scenario.name.clone(),
        controller: controller.kind(),
        dt,
        duration: steps as f64 * dt,
        records: Vec::with_capacity(steps + 1),
        abort: None,
    };
    let mut state = scenario.initial_state;
    let mut u_prev = allocator.h(&params.hover_wrench());

    for k in 0..=steps {
        let t = k as f64 * dt;
        let desired = scenario.reference.sample(t);
        let started = Instant::now();
        let step = match controller {
            Controller::Nmpc(c) => {
                let window = scenario.reference.window(t, dt, horizon + 1);
                c.step(&state, &window, &u_prev).map(|out| {
                    (
                        out.wrench,
                        out.command,
                        out.solution.diagnostics.sqp_iterations,
                        out.solution.diagnostics.kkt_residual,
                        out.stage0_residual,
                    )
                })
            }
            Controller::Lqr(c) => {
                let v = c.control(&state, &desired);
                Ok((v, allocator.h(&v), 0, 0.0, 0.0))
            }
            Controller::Smc(c) => c.control(&state, &desired).map(|v| (v, allocator.h(&v), 0, 0.0, 0.0)),
        };
        let solve_time = started.elapsed().as_secs_f64();
        let (wrench, command, sqp_iterations, kkt_residual, constraint_residual) = match step {
            Ok(s) => s,
            Err(e) => {
                trace.abort = Some(Abort { time: t, reason: e.to_string() });
                break;
            }
        };
        let realized = apply_actuator_limits(&command, &u_prev, limits, dt);
        let d = composite_disturbance(t, &disturbance);
        let mut d_vec = Vector6::zeros();
        d_vec.fixed_rows_mut::<3>(0).copy_from(&d.force);
        d_vec.fixed_rows_mut::<3>(3).copy_from(&d.torque);
        trace.records.push(StepRecord {
            t,
            state: state.to_vector(),
            reference: desired.to_state_vector(),
            wrench: wrench.to_vector(),
            command: command.to_vector(),
            realized: realized.to_vector(),
            disturbance: d_vec,
            sqp_iterations,
            kkt_residual,
            solve_time,
            constraint_residual,
        });
        if k == steps {
            break;
        }
        let applied: VirtualControl = propulsive_wrench(&realized, params);
        match step_rk4(&state, &applied, &d, params, dt) {
            Ok(next) if next.is_finite() => state = next,
            Ok(_) => {
                trace.abort = Some(Abort { time: t + dt, reason: "non-finite state".into() });
                break;
            }
            Err(e) => {
                trace.abort = Some(Abort { time: t + dt, reason: e.to_string() });
                break;
            }
        }
        u_prev = realized;
    }
    Ok(trace)
}

/// Convenience wrapper: builds the controller and runs the episode.
pub fn run_scenario(
    scenario: &Scenario,
    kind: ControllerKind,
    settings: &ControllerSettings,
    params: &VehicleParams,
    limits: &ActuatorLimits,
    dt: f64,
    seed: u64,
) -> Result<EpisodeTrace> {
    let mut controller = Controller::new(kind, settings, params, limits, dt)?;
    run_episode(scenario, &mut controller, params, limits, dt, seed)
}

/// Initial actuator state of every episode.
pub fn hover_command(params: &VehicleParams) -> Result<ActuatorCommand> {
    Ok(Allocator::new(params)?.h(&params.hover_wrench()))
}

//! Desired trajectories for the built-in scenarios.

use crate::linalg::Vector12;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// One sample of a desired trajectory. The desired body rate is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DesiredState {
    pub position: Vector3<f64>,
    pub attitude: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl DesiredState {
    pub fn hover(position: Vector3<f64>) -> Self {
        Self { position, ..Self::default() }
    }

    /// `[xi, eta, xi_dot, 0]` in the plant state layout.
    pub fn to_state_vector(&self) -> Vector12 {
        let mut x = Vector12::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.attitude);
        x.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        x
    }
}

/// `(a_x sin(pi t/T), a_y sin(2 pi t/T), z0)` with analytic derivatives, level attitude.
pub fn lemniscate_reference(t: f64, amplitude_x: f64, amplitude_y: f64, period: f64, altitude: f64) -> DesiredState {
    let w1 = PI / period;
    let w2 = 2.0 * PI / period;
    let (s1, c1) = (w1 * t).sin_cos();
    let (s2, c2) = (w2 * t).sin_cos();
    DesiredState {
        position: Vector3::new(amplitude_x * s1, amplitude_y * s2, altitude),
        attitude: Vector3::zeros(),
        velocity: Vector3::new(amplitude_x * w1 * c1, amplitude_y * w2 * c2, 0.0),
        acceleration: Vector3::new(-amplitude_x * w1 * w1 * s1, -amplitude_y * w2 * w2 * s2, 0.0),
    }
}

pub const SLUGGISH_PERIOD: f64 = 20.0;

/// Period parameter giving a 5 m/s^2 peak acceleration on both axes: `pi sqrt(4/5)`.
pub fn agile_period() -> f64 {
    PI * (4.0_f64 / 5.0).sqrt()
}

pub fn sluggish_lemniscate_reference(t: f64) -> DesiredState {
    lemniscate_reference(t, 4.0, 1.0, SLUGGISH_PERIOD, -4.0)
}

pub fn agile_lemniscate_reference(t: f64) -> DesiredState {
    lemniscate_reference(t, 4.0, 1.0, agile_period(), -4.0)
}

/// Transit to a hold point followed by a cycle of attitude set-points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoverAttitudeSchedule {
    pub start: [f64; 3],
    pub target: [f64; 3],
    /// Duration of the quintic transit, s.
    pub transit_time: f64,
    /// Time the first attitude set-point starts, s.
    pub first_setpoint: f64,
    /// Hold time per set-point, s.
    pub hold_time: f64,
    /// Cycled (roll, pitch) set-points in degrees.
    pub setpoints_deg: Vec<[f64; 2]>,
}

impl Default for HoverAttitudeSchedule {
    fn default() -> Self {
        Self {
            start: [0.0; 3],
            target: [4.0, 4.0, -4.0],
            transit_time: 10.0,
            first_setpoint: 20.0,
            hold_time: 10.0,
            setpoints_deg: vec![[20.0, 0.0], [0.0, 20.0], [-20.0, 0.0], [0.0, -20.0]],
        }
    }
}

impl HoverAttitudeSchedule {
    pub fn sample(&self, t: f64) -> DesiredState {
        let start = Vector3::from(self.start);
        let delta = Vector3::from(self.target) - start;
        let (p, dp, ddp) = quintic(t, self.transit_time);
        let mut attitude = Vector3::zeros();
        if t >= self.first_setpoint && !self.setpoints_deg.is_empty() && self.hold_time > 0.0 {
            let k = ((t - self.first_setpoint) / self.hold_time).floor() as usize % self.setpoints_deg.len();
            let [roll, pitch] = self.setpoints_deg[k];
            attitude = Vector3::new(roll.to_radians(), pitch.to_radians(), 0.0);
        }
        DesiredState { position: start + delta * p, attitude, velocity: delta * dp, acceleration: delta * ddp }
    }
}

/// Rest-to-rest quintic blend `10s^3 - 15s^4 + 6s^5` and its time derivatives.
fn quintic(t: f64, duration: f64) -> (f64, f64, f64) {
    if duration <= 0.0 || t >= duration {
        return (1.0, 0.0, 0.0);
    }
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = t / duration;
    let p = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let dp = 30.0 * s * s * (1.0 - s) * (1.0 - s) / duration;
    let ddp = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (duration * duration);
    (p, dp, ddp)
}

pub fn hover_attitude_schedule(t: f64) -> DesiredState {
    HoverAttitudeSchedule::default().sample(t)
}

/// Any of the supported desired trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    Lemniscate {
        amplitude_x: f64,
        amplitude_y: f64,
        period: f64,
        altitude: f64,
    },
    HoverAttitude(HoverAttitudeSchedule),
    Hold {
        position: [f64; 3],
        #[serde(default)]
        attitude: [f64; 3],
    },
}

impl Reference {
    pub fn sample(&self, t: f64) -> DesiredState {
        match self {
            Reference::Lemniscate { amplitude_x, amplitude_y, period, altitude } => {
                lemniscate_reference(t, *amplitude_x, *amplitude_y, *period, *altitude)
            }
            Reference::HoverAttitude(schedule) => schedule.sample(t),
            Reference::Hold { position, attitude } => DesiredState {
                position: Vector3::from(*position),
                attitude: Vector3::from(*attitude),
                ..DesiredState::default()
            },
        }
    }

    /// `count` samples spaced `dt` apart starting at `t`.
    pub fn window(&self, t: f64, dt: f64, count: usize) -> Vec<DesiredState> {
        (0..count).map(|i| self.sample(t + i as f64 * dt)).collect()
    }
}

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// External force (inertial frame) and moment (body frame).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Disturbance {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// Composite sinusoid applied identically on each axis (up to per-axis phase offsets):
///
/// ```text
/// f(t) = A_f (sin(w1 t + p) + 0.5 sin(w2 t + 1 + p))
/// tau(t) = A_tau (sin(w3 t + p) + 0.5 sin(w4 t + 2 + p))
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub enabled: bool,
    /// N
    pub force_amplitude: f64,
    /// N m
    pub torque_amplitude: f64,
    /// rad/s, primary and secondary force frequencies
    pub force_frequencies: [f64; 2],
    /// rad/s, primary and secondary torque frequencies
    pub torque_frequencies: [f64; 2],
    /// Per-axis phase offsets (rad) added to every sinusoid of the force.
    pub force_phase: [f64; 3],
    /// Per-axis phase offsets (rad) added to every sinusoid of the torque.
    pub torque_phase: [f64; 3],
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            force_amplitude: 0.5,
            torque_amplitude: 0.05,
            force_frequencies: [0.5, 1.3],
            torque_frequencies: [0.7, 1.1],
            force_phase: [0.0; 3],
            torque_phase: [0.0; 3],
        }
    }
}

impl DisturbanceConfig {
    pub fn enabled() -> Self {
        Self { enabled: true, ..Self::default() }
    }
}

pub fn composite_disturbance(t: f64, config: &DisturbanceConfig) -> Disturbance {
    if !config.enabled {
        return Disturbance::zero();
    }
    let [wf1, wf2] = config.force_frequencies;
    let [wt1, wt2] = config.torque_frequencies;
    let force = Vector3::from_fn(|i, _| {
        let p = config.force_phase[i];
        config.force_amplitude * ((wf1 * t + p).sin() + 0.5 * (wf2 * t + 1.0 + p).sin())
    });
    let torque = Vector3::from_fn(|i, _| {
        let p = config.torque_phase[i];
        config.torque_amplitude * ((wt1 * t + p).sin() + 0.5 * (wt2 * t + 2.0 + p).sin())
    });
    Disturbance { force, torque }
}

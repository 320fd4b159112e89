use crate::linalg::wrap_angle;
use crate::sim::DesiredState;
use crate::vehicle::{euler_rate_matrix, rotation_body_to_inertial, VehicleParams, VehicleState, VirtualControl};
use crate::{Error, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Per-axis sliding-surface slopes, reaching gains and boundary-layer widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcConfig {
    pub lambda_position: [f64; 3],
    pub lambda_attitude: [f64; 3],
    pub gain_position: [f64; 3],
    pub gain_attitude: [f64; 3],
    pub boundary_position: [f64; 3],
    pub boundary_attitude: [f64; 3],
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            lambda_position: [1.5; 3],
            lambda_attitude: [4.0; 3],
            gain_position: [4.0; 3],
            gain_attitude: [6.0; 3],
            boundary_position: [0.1; 3],
            boundary_attitude: [0.1; 3],
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            &self.lambda_position,
            &self.lambda_attitude,
            &self.gain_position,
            &self.gain_attitude,
            &self.boundary_position,
            &self.boundary_attitude,
        ];
        if all.iter().flat_map(|a| a.iter()).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("smc: all gains must be positive".into()));
        }
        Ok(())
    }
}

fn sat(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Sliding surfaces `(s_p, s_a)` at the given state.
pub fn sliding_surfaces(
    state: &VehicleState,
    desired: &DesiredState,
    config: &SmcConfig,
) -> (Vector3<f64>, Vector3<f64>) {
    let ev = state.velocity - desired.velocity;
    let ep = state.position - desired.position;
    let s_p = Vector3::from_fn(|i, _| ev[i] + config.lambda_position[i] * ep[i]);
    let s_a = Vector3::from_fn(|i, _| {
        state.angular_velocity[i] + config.lambda_attitude[i] * wrap_angle(state.attitude[i] - desired.attitude[i])
    });
    (s_p, s_a)
}

/// Sliding-mode law with a saturating boundary layer.
///
/// Translation: equivalent control of `m v' = m g + R f - A_T v` plus the
/// switching term `-m k sat(s / phi)`. Rotation: equivalent control of the
/// rigid-body moment equation with the surface derivative taken through the
/// Euler-rate map, plus `-J k sat(s / phi)`.
pub fn smc_control(
    state: &VehicleState,
    desired: &DesiredState,
    config: &SmcConfig,
    params: &VehicleParams,
) -> Result<VirtualControl> {
    let (s_p, s_a) = sliding_surfaces(state, desired, config);
    let m = params.mass;
    let ev = state.velocity - desired.velocity;
    let accel = Vector3::from_fn(|i, _| {
        desired.acceleration[i]
            - config.lambda_position[i] * ev[i]
            - config.gain_position[i] * sat(s_p[i] / config.boundary_position[i])
    });
    let inertial = (accel - params.gravity_vector()) * m + params.translational_drag_matrix() * state.velocity;
    let force = rotation_body_to_inertial(&state.attitude).transpose() * inertial;

    let omega = state.angular_velocity;
    let inertia = params.inertia_matrix();
    let attitude_rate = euler_rate_matrix(&state.attitude)? * omega;
    let omega_dot = Vector3::from_fn(|i, _| {
        -config.lambda_attitude[i] * attitude_rate[i]
            - config.gain_attitude[i] * sat(s_a[i] / config.boundary_attitude[i])
    });
    let torque = omega.cross(&(inertia * omega)) + params.rotational_drag_matrix() * omega + inertia * omega_dot;
    Ok(VirtualControl::new(force, torque))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcController {
    config: SmcConfig,
    params: VehicleParams,
}

impl SmcController {
    pub fn new(config: &SmcConfig, params: &VehicleParams) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Self { config: config.clone(), params: *params })
    }

    pub fn control(&self, state: &VehicleState, desired: &DesiredState) -> Result<VirtualControl> {
        smc_control(state, desired, &self.config, &self.params)
    }
}

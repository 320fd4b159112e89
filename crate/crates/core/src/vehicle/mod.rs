//! Single-axis tiltrotor quadrotor plant.
//!
//! State and parameter types, per-rotor propulsion, rigid-body dynamics with
//! an RK4 integrator, the plant-side actuator limiter and the composite
//! sinusoidal disturbance.

mod actuators;
mod disturbance;
mod dynamics;
mod propulsion;

pub use actuators::{apply_actuator_limits, ActuatorCommand, ActuatorLimits};
pub use disturbance::{composite_disturbance, Disturbance, DisturbanceConfig};
pub use dynamics::{euler_rate_matrix, rotation_body_to_inertial, state_derivative, step_rk4, SINGULARITY_GUARD};
pub(crate) use propulsion::wrench_from_rotor_forces;
pub use propulsion::{propulsive_wrench, rotor_force, rpm_to_rad_per_s, RAD_PER_S_TO_RPM};

use crate::linalg::{wrap_angle, Vector12, Vector6};
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Full vehicle state: position, Euler attitude, linear and angular velocity.
///
/// Position is NED in meters, attitude is (roll, pitch, yaw) in radians for the
/// yaw-pitch-roll sequence, velocity is the inertial-frame rate of the position
/// and angular velocity is body-frame (p, q, r).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub position: Vector3<f64>,
    pub attitude: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl VehicleState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { position, ..Self::default() }
    }

    /// Packs the state as `[position, attitude, velocity, angular_velocity]`.
    pub fn to_vector(&self) -> Vector12 {
        let mut x = Vector12::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.attitude);
        x.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(9).copy_from(&self.angular_velocity);
        x
    }

    pub fn from_vector(x: &Vector12) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            attitude: x.fixed_rows::<3>(3).into_owned(),
            velocity: x.fixed_rows::<3>(6).into_owned(),
            angular_velocity: x.fixed_rows::<3>(9).into_owned(),
        }
    }

    /// Roll and yaw wrapped to `(-pi, pi]`. Pitch is left alone; the singularity
    /// guard keeps it inside `(-pi/2, pi/2)`.
    pub fn wrapped(mut self) -> Self {
        self.attitude.x = wrap_angle(self.attitude.x);
        self.attitude.z = wrap_angle(self.attitude.z);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Physical vehicle parameters. Defaults are the custom tiltrotor airframe values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia matrix, kg m^2.
    pub inertia: [f64; 3],
    /// Rotor distance from the center of mass, m.
    pub arm_length: f64,
    /// N / (rad/s)^2
    pub thrust_coefficient: f64,
    /// N m / (rad/s)^2
    pub torque_coefficient: f64,
    /// Translational drag diagonal, kg/s.
    pub translational_drag: [f64; 3],
    /// Rotational drag diagonal.
    pub rotational_drag: [f64; 3],
    /// Gravity magnitude along +z (NED), m/s^2.
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 0.468,
            inertia: [4.856e-3, 4.856e-3, 8.801e-3],
            arm_length: 0.225,
            thrust_coefficient: 1.22e-5,
            torque_coefficient: 1.689e-7,
            translational_drag: [0.3, 0.3, 0.25],
            rotational_drag: [0.2, 0.2, 0.2],
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        let nonnegative = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")))
            }
        };
        positive("mass", self.mass)?;
        for j in self.inertia {
            positive("inertia", j)?;
        }
        positive("arm_length", self.arm_length)?;
        positive("thrust_coefficient", self.thrust_coefficient)?;
        positive("torque_coefficient", self.torque_coefficient)?;
        for a in self.translational_drag {
            nonnegative("translational_drag", a)?;
        }
        for a in self.rotational_drag {
            nonnegative("rotational_drag", a)?;
        }
        nonnegative("gravity", self.gravity)?;
        Ok(())
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.gravity)
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    pub fn translational_drag_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.translational_drag))
    }

    pub fn rotational_drag_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.rotational_drag))
    }

    /// Wrench that balances gravity at level attitude: `(0, 0, -m g, 0, 0, 0)`.
    pub fn hover_wrench(&self) -> VirtualControl {
        VirtualControl::new(Vector3::new(0.0, 0.0, -self.mass * self.gravity), Vector3::zeros())
    }
}

/// Body-frame wrench commanded by a controller: propulsive force and moment.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VirtualControl {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl VirtualControl {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `[f_x, f_y, f_z, tau_x, tau_y, tau_z]`
    pub fn to_vector(&self) -> Vector6 {
        Vector6::new(self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z)
    }

    pub fn from_vector(v: &Vector6) -> Self {
        Self { force: Vector3::new(v[0], v[1], v[2]), torque: Vector3::new(v[3], v[4], v[5]) }
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }
}

//! Per-rotor thrust vectors and the resulting body-frame wrench.
//!
//! Every rotor lifts along `-z_B` at zero tilt. Rotors 1 and 2 tilt in the
//! body x-z plane (rotor 2 mirrored), rotors 3 and 4 in the y-z plane (rotor 4
//! mirrored). Rotor spin direction only enters through the yaw drag torque.

use super::{ActuatorCommand, VehicleParams, VirtualControl};
use crate::{Error, Result};
use nalgebra::Vector3;
use std::f64::consts::PI;

pub const RAD_PER_S_TO_RPM: f64 = 30.0 / PI;

pub fn rpm_to_rad_per_s(rpm: f64) -> f64 {
    rpm * PI / 30.0
}

/// Thrust magnitude of a rotor spinning at `speed_rpm` (sign ignored).
pub(crate) fn thrust(speed_rpm: f64, params: &VehicleParams) -> f64 {
    let w = rpm_to_rad_per_s(speed_rpm);
    params.thrust_coefficient * w * w
}

/// Unit thrust direction of rotor `index` (0-based) at tilt `beta`, in the body frame.
pub(crate) fn thrust_direction(index: usize, beta: f64) -> Vector3<f64> {
    let (s, c) = beta.sin_cos();
    match index {
        0 => Vector3::new(s, 0.0, -c),
        1 => Vector3::new(-s, 0.0, -c),
        2 => Vector3::new(0.0, s, -c),
        _ => Vector3::new(0.0, -s, -c),
    }
}

/// Body-frame force produced by rotor `rotor` (1..=4).
pub fn rotor_force(rotor: usize, speed_rpm: f64, tilt: f64, params: &VehicleParams) -> Result<Vector3<f64>> {
    if !(1..=4).contains(&rotor) {
        return Err(Error::InvalidRotor(rotor));
    }
    Ok(thrust_direction(rotor - 1, tilt) * thrust(speed_rpm, params))
}

/// Total propulsive force and moment in the body frame.
///
/// Roll moment comes from the lift difference of rotors 1/2, pitch from rotors
/// 3/4, and yaw from rotor drag torque (`k_Q / k_T` times lift) plus the
/// lever arm of the tilt-induced lateral forces.
pub fn propulsive_wrench(command: &ActuatorCommand, params: &VehicleParams) -> VirtualControl {
    let forces: [Vector3<f64>; 4] =
        std::array::from_fn(|i| thrust_direction(i, command.tilt[i]) * thrust(command.rotor_speed[i], params));
    wrench_from_rotor_forces(&forces, params)
}

/// Linear map from the four body-frame rotor force vectors to the total wrench.
pub(crate) fn wrench_from_rotor_forces(f: &[Vector3<f64>; 4], params: &VehicleParams) -> VirtualControl {
    let l = params.arm_length;
    let kappa = params.torque_coefficient / params.thrust_coefficient;
    let force = f[0] + f[1] + f[2] + f[3];
    let torque = Vector3::new(
        l * (f[0].z - f[1].z),
        l * (-f[2].z + f[3].z),
        kappa * (-f[0].z - f[1].z + f[2].z + f[3].z) + l * (-f[0].x + f[1].x) + l * (f[2].y - f[3].y),
    );
    VirtualControl::new(force, torque)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // (30/pi) sqrt(m g / (4 k_T)) with the default airframe, evaluated offline.
    const HOVER_RPM: f64 = 2928.996827291341;

    fn hover_rpm_exact(params: &VehicleParams) -> f64 {
        RAD_PER_S_TO_RPM * (params.mass * params.gravity / 4.0 / params.thrust_coefficient).sqrt()
    }

    #[test]
    fn hover_speed_value() {
        let rpm = hover_rpm_exact(&VehicleParams::default());
        assert!((rpm - HOVER_RPM).abs() < 1e-9, "{rpm}");
    }

    #[test]
    fn rotor_lift_at_zero_tilt() {
        let params = VehicleParams::default();
        let f1 = rotor_force(1, HOVER_RPM, 0.0, &params).unwrap();
        assert_eq!(f1.x, 0.0);
        assert_eq!(f1.y, 0.0);
        assert_relative_eq!(f1.z, -1.1478, epsilon = 1e-4);
        let f3 = rotor_force(3, -HOVER_RPM, 0.0, &params).unwrap();
        assert_relative_eq!(f3, f1, epsilon = 1e-15);
    }

    #[test]
    fn rotor_zero_speed() {
        let params = VehicleParams::default();
        assert_eq!(rotor_force(1, 0.0, 0.3, &params).unwrap(), Vector3::zeros());
    }

    #[test]
    fn rotor_index_checked() {
        let params = VehicleParams::default();
        assert!(matches!(rotor_force(0, 1.0, 0.0, &params), Err(Error::InvalidRotor(0))));
        assert!(matches!(rotor_force(5, 1.0, 0.0, &params), Err(Error::InvalidRotor(5))));
    }

    #[test]
    fn hover_wrench() {
        let params = VehicleParams::default();
        let rpm = hover_rpm_exact(&params);
        let cmd = ActuatorCommand::new([rpm, rpm, -rpm, -rpm], [0.0; 4]);
        let w = propulsive_wrench(&cmd, &params);
        assert_relative_eq!(w.force.z, -params.mass * params.gravity, epsilon = 1e-12);
        assert_relative_eq!(w.force.z, -4.5911, epsilon = 1e-4);
        assert!(w.force.x.abs() < 1e-15 && w.force.y.abs() < 1e-15);
        assert!(w.torque.norm() < 1e-15);
    }

    #[test]
    fn zero_command_zero_wrench() {
        let w = propulsive_wrench(&ActuatorCommand::zero(), &VehicleParams::default());
        assert_eq!(w, VirtualControl::zero());
    }

    // Brute-force roll moment check from individual rotor forces.
    #[test]
    fn differential_lift_rolls() {
        let params = VehicleParams::default();
        let cmd = ActuatorCommand::new([3100.0, 2750.0, -2929.1, -2929.1], [0.0; 4]);
        let w = propulsive_wrench(&cmd, &params);
        let f1 = rotor_force(1, 3100.0, 0.0, &params).unwrap();
        let f2 = rotor_force(2, 2750.0, 0.0, &params).unwrap();
        assert_relative_eq!(w.torque.x, params.arm_length * (f1.z - f2.z), epsilon = 1e-15);
        assert!(w.torque.x < 0.0);
        assert_eq!(w.torque.y, 0.0);
        let kappa = params.torque_coefficient / params.thrust_coefficient;
        assert_relative_eq!(w.torque.z, kappa * (-f1.z - f2.z) - 2.0 * kappa * 1.1478, epsilon = 1e-4);
    }

    #[test]
    fn tilt_flip_mirrors_lateral_force() {
        let params = VehicleParams::default();
        for rotor in 1..=4 {
            let a = rotor_force(rotor, 3000.0, 0.3, &params).unwrap();
            let b = rotor_force(rotor, 3000.0, -0.3, &params).unwrap();
            assert_relative_eq!(a.z, b.z, epsilon = 1e-15);
            assert_relative_eq!(a.x, -b.x, epsilon = 1e-15);
            assert_relative_eq!(a.y, -b.y, epsilon = 1e-15);
            assert!(a.x.abs() + a.y.abs() > 0.1);
        }
    }
}

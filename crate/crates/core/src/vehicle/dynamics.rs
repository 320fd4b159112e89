use super::{Disturbance, VehicleParams, VehicleState, VirtualControl};
use crate::linalg::Vector12;
use crate::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use std::f64::consts::FRAC_PI_2;

/// Minimum distance of |pitch| from pi/2 before the Euler-rate map is refused.
pub const SINGULARITY_GUARD: f64 = 1e-3;

/// Euler-rate matrix `H` with `eta_dot = H(eta) * omega`.
pub fn euler_rate_matrix(attitude: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let (phi, theta) = (attitude.x, attitude.y);
    if theta.is_nan() || theta.abs() >= FRAC_PI_2 - SINGULARITY_GUARD {
        return Err(Error::Singularity { pitch: theta.abs() });
    }
    let (sp, cp) = phi.sin_cos();
    let (ct, tt) = (theta.cos(), theta.tan());
    #[rustfmt::skip]
    let h = Matrix3::new(
        1.0, sp * tt,  cp * tt,
        0.0, cp,       -sp,
        0.0, sp / ct,  cp / ct,
    );
    Ok(h)
}

/// Body-to-inertial rotation for the yaw-pitch-roll sequence, `Rz(psi) Ry(theta) Rx(phi)`.
pub fn rotation_body_to_inertial(attitude: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = attitude.x.sin_cos();
    let (st, ct) = attitude.y.sin_cos();
    let (ss, cs) = attitude.z.sin_cos();
    #[rustfmt::skip]
    let r = Matrix3::new(
        cs * ct, cs * st * sp - ss * cp, cs * st * cp + ss * sp,
        ss * ct, ss * st * sp + cs * cp, ss * st * cp - cs * sp,
        -st,     ct * sp,                ct * cp,
    );
    r
}

/// Continuous-time state derivative of the rigid body.
///
/// The velocity entry of the state is the inertial rate of the position, so the
/// translational drag acts on it directly.
pub fn state_derivative(
    state: &VehicleState,
    wrench: &VirtualControl,
    disturbance: &Disturbance,
    params: &VehicleParams,
) -> Result<Vector12> {
    let h = euler_rate_matrix(&state.attitude)?;
    let rotation = rotation_body_to_inertial(&state.attitude);
    let omega = state.angular_velocity;
    let inertia = Vector3::from(params.inertia);
    let drag_t = Vector3::from(params.translational_drag);
    let drag_r = Vector3::from(params.rotational_drag);

    let accel = params.gravity_vector()
        + (rotation * wrench.force - drag_t.component_mul(&state.velocity) + disturbance.force) / params.mass;
    let attitude_rate = h * omega;
    let j_omega = inertia.component_mul(&omega);
    let moment = -omega.cross(&j_omega) + wrench.torque - drag_r.component_mul(&omega) + disturbance.torque;
    let omega_dot = moment.component_div(&inertia);

    let mut dx = Vector12::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&state.velocity);
    dx.fixed_rows_mut::<3>(3).copy_from(&attitude_rate);
    dx.fixed_rows_mut::<3>(6).copy_from(&accel);
    dx.fixed_rows_mut::<3>(9).copy_from(&omega_dot);
    Ok(dx)
}

/// One classical Runge-Kutta step with the wrench and disturbance held over `dt`.
/// Roll and yaw are wrapped afterwards.
pub fn step_rk4(
    state: &VehicleState,
    wrench: &VirtualControl,
    disturbance: &Disturbance,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let x = state.to_vector();
    let f = |x: &Vector12| state_derivative(&VehicleState::from_vector(x), wrench, disturbance, params);
    let k1 = f(&x)?;
    let k2 = f(&(x + k1 * (0.5 * dt)))?;
    let k3 = f(&(x + k2 * (0.5 * dt)))?;
    let k4 = f(&(x + k3 * dt))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(VehicleState::from_vector(&next).wrapped())
}

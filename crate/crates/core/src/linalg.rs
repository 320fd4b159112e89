//! Fixed-size aliases and small numeric helpers shared across modules.

use nalgebra::{SMatrix, SVector};
use std::f64::consts::PI;

pub type Vector6 = SVector<f64, 6>;
pub type Vector8 = SVector<f64, 8>;
pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix12x6 = SMatrix<f64, 12, 6>;
pub type Matrix6x8 = SMatrix<f64, 6, 8>;
pub type Matrix8x6 = SMatrix<f64, 8, 6>;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Infinity norm of a slice, NaN-propagating.
pub fn inf_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |acc, v| if v.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(v.abs()) })
}

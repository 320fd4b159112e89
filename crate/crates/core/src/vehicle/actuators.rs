use crate::linalg::Vector8;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

/// Rotor speeds (rpm, signed: rotors 1-2 positive, 3-4 negative) and tilt angles (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorCommand {
    pub rotor_speed: [f64; 4],
    pub tilt: [f64; 4],
}

impl ActuatorCommand {
    pub fn new(rotor_speed: [f64; 4], tilt: [f64; 4]) -> Self {
        Self { rotor_speed, tilt }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// `[Omega_1..4, beta_1..4]`
    pub fn to_vector(&self) -> Vector8 {
        Vector8::from_fn(|i, _| if i < 4 { self.rotor_speed[i] } else { self.tilt[i - 4] })
    }

    pub fn from_vector(u: &Vector8) -> Self {
        Self { rotor_speed: [u[0], u[1], u[2], u[3]], tilt: [u[4], u[5], u[6], u[7]] }
    }

    pub fn is_finite(&self) -> bool {
        self.rotor_speed.iter().chain(&self.tilt).all(|v| v.is_finite())
    }

    /// Rotors 1 and 2 spin positive, 3 and 4 negative (zero allowed).
    pub fn has_valid_signs(&self) -> bool {
        self.rotor_speed[0] >= 0.0
            && self.rotor_speed[1] >= 0.0
            && self.rotor_speed[2] <= 0.0
            && self.rotor_speed[3] <= 0.0
    }
}

/// Magnitude and rate limits of the rotors and tilt servos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorLimits {
    /// rpm
    pub rotor_speed_max: f64,
    /// rpm
    pub rotor_speed_min: f64,
    /// rad, symmetric
    pub tilt_max: f64,
    /// rpm/s
    pub rotor_rate_max: f64,
    /// rad/s
    pub tilt_rate_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self {
            rotor_speed_max: 10_000.0,
            rotor_speed_min: 0.0,
            tilt_max: FRAC_PI_4,
            rotor_rate_max: 8000.0,
            tilt_rate_max: 5.0,
        }
    }
}

impl ActuatorLimits {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.rotor_speed_min >= 0.0 && self.rotor_speed_min < self.rotor_speed_max)
            || !self.rotor_speed_max.is_finite()
        {
            return bad(format!(
                "rotor speed limits must satisfy 0 <= min < max, got [{}, {}]",
                self.rotor_speed_min, self.rotor_speed_max
            ));
        }
        if !(self.tilt_max > 0.0 && self.tilt_max < FRAC_PI_2) {
            return bad(format!("tilt_max must lie in (0, pi/2), got {}", self.tilt_max));
        }
        if !(self.rotor_rate_max > 0.0 && self.tilt_rate_max > 0.0) {
            return bad("actuator rate limits must be positive".into());
        }
        Ok(())
    }

    /// Absolute per-channel box `(lower, upper)` respecting the rotor sign pattern.
    pub fn absolute_box(&self) -> (Vector8, Vector8) {
        let (lo, hi) = (self.rotor_speed_min, self.rotor_speed_max);
        let t = self.tilt_max;
        let lower = Vector8::from_column_slice(&[lo, lo, -hi, -hi, -t, -t, -t, -t]);
        let upper = Vector8::from_column_slice(&[hi, hi, -lo, -lo, t, t, t, t]);
        (lower, upper)
    }

    /// Per-channel maximum rate `[rpm/s x4, rad/s x4]`.
    pub fn rates(&self) -> Vector8 {
        let (w, b) = (self.rotor_rate_max, self.tilt_rate_max);
        Vector8::from_column_slice(&[w, w, w, w, b, b, b, b])
    }

    /// Reachable window after `elapsed` seconds from `current`, intersected with the
    /// absolute box. Shared by the plant limiter and the controller's stage bounds so
    /// that both compute bit-identical limits.
    pub fn reachable_window(&self, current: &Vector8, elapsed: f64) -> (Vector8, Vector8) {
        let (box_lo, box_hi) = self.absolute_box();
        let rates = self.rates();
        let lower = Vector8::from_fn(|i, _| (current[i] - rates[i] * elapsed).max(box_lo[i]));
        let upper = Vector8::from_fn(|i, _| (current[i] + rates[i] * elapsed).min(box_hi[i]));
        (lower, upper)
    }
}

/// Plant-side actuator model: each channel moves toward its command by at most
/// `rate * dt`, then is clamped to the absolute box.
pub fn apply_actuator_limits(
    command: &ActuatorCommand,
    previous: &ActuatorCommand,
    limits: &ActuatorLimits,
    dt: f64,
) -> ActuatorCommand {
    let cmd = command.to_vector();
    let prev = previous.to_vector();
    let rates = limits.rates();
    let (box_lo, box_hi) = limits.absolute_box();
    let realized = Vector8::from_fn(|i, _| {
        let step = rates[i] * dt;
        let mut u = cmd[i];
        if u > prev[i] + step {
            u = prev[i] + step;
        } else if u < prev[i] - step {
            u = prev[i] - step;
        }
        u.max(box_lo[i]).min(box_hi[i])
    });
    ActuatorCommand::from_vector(&realized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hover() -> ActuatorCommand {
        ActuatorCommand::new([2929.1, 2929.1, -2929.1, -2929.1], [0.0; 4])
    }

    #[test]
    fn inside_limits_unchanged() {
        let limits = ActuatorLimits::default();
        let cmd = ActuatorCommand::new([3000.0, 2900.0, -2950.0, -2929.1], [0.05, -0.02, 0.0, 0.09]);
        assert_eq!(apply_actuator_limits(&cmd, &hover(), &limits, 0.02), cmd);
    }

    #[test]
    fn magnitude_clamp() {
        let limits = ActuatorLimits { rotor_rate_max: 1e6, ..ActuatorLimits::default() };
        let mut prev = hover();
        prev.rotor_speed[0] = 9990.0;
        let mut cmd = prev;
        cmd.rotor_speed[0] = 10_500.0;
        let out = apply_actuator_limits(&cmd, &prev, &limits, 0.02);
        assert_eq!(out.rotor_speed[0], 10_000.0);
    }

    #[test]
    fn tilt_rate_window() {
        let limits = ActuatorLimits::default();
        let mut cmd = hover();
        cmd.tilt[0] = 0.5;
        let out = apply_actuator_limits(&cmd, &hover(), &limits, 0.02);
        assert_relative_eq!(out.tilt[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn sign_pattern_never_crossed() {
        let limits = ActuatorLimits { rotor_rate_max: 1e6, ..ActuatorLimits::default() };
        let cmd = ActuatorCommand::new([-500.0, 100.0, 300.0, -100.0], [0.0; 4]);
        let out = apply_actuator_limits(&cmd, &hover(), &limits, 0.02);
        assert!(out.has_valid_signs());
        assert_eq!(out.rotor_speed, [0.0, 100.0, 0.0, -100.0]);
    }

    #[test]
    fn window_matches_limiter() {
        let limits = ActuatorLimits::default();
        let prev = hover().to_vector();
        let (lo, hi) = limits.reachable_window(&prev, 0.02);
        assert_relative_eq!(lo[0], 2769.1, epsilon = 1e-9);
        assert_relative_eq!(hi[0], 3089.1, epsilon = 1e-9);
        let edge = ActuatorCommand::from_vector(&hi);
        assert_eq!(apply_actuator_limits(&edge, &hover(), &limits, 0.02), edge);
        let edge = ActuatorCommand::from_vector(&lo);
        assert_eq!(apply_actuator_limits(&edge, &hover(), &limits, 0.02), edge);
    }

    #[test]
    fn limits_validation() {
        assert!(ActuatorLimits::default().validate().is_ok());
        let bad = ActuatorLimits { rotor_speed_min: 10_000.0, ..ActuatorLimits::default() };
        assert!(bad.validate().is_err());
        let bad = ActuatorLimits { tilt_max: 2.0, ..ActuatorLimits::default() };
        assert!(bad.validate().is_err());
        let bad = ActuatorLimits { tilt_rate_max: 0.0, ..ActuatorLimits::default() };
        assert!(bad.validate().is_err());
    }
}

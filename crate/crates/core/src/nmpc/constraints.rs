//! Actuator bounds expressed on the rotor forces.
//!
//! Each rotor's force in its tilt plane, `a = (lateral, lift) = P v`, is linear
//! in the wrench. Wherever the rotor pushes upward (`lift < 0`) the command
//! bounds `lower <= h(v) <= upper` describe the same set as
//!
//! - speed: `T(lo)^2 <= |a|^2 <= T(hi)^2`, quadratic in `v`;
//! - tilt: `lateral cos(b_lo) + lift sin(b_lo) >= 0` and
//!   `lateral cos(b_hi) + lift sin(b_hi) <= 0`, linear in `v`.
//!
//! The solver linearizes these rows instead of `h` itself: the tilt rows are
//! exact, and the speed rows have a constant Hessian that enters the QP through
//! the Lagrangian. Rows are scaled by the thrust at maximum rotor speed.

use super::StageBounds;
use crate::allocator::{Allocator, RotorForceComponents};
use crate::linalg::Vector6;
use crate::vehicle::{rpm_to_rad_per_s, ActuatorLimits};
use nalgebra::{Matrix2x6, Matrix6, RowVector2, RowVector6, SMatrix, Vector2};

pub(crate) const ROWS: usize = 12;

pub(crate) type RowValues = SMatrix<f64, ROWS, 1>;
pub(crate) type RowJacobian = SMatrix<f64, ROWS, 6>;

/// Tilt-plane maps of the four rotors and the row scaling.
#[derive(Debug, Clone)]
pub(crate) struct ForceConstraints {
    maps: [Matrix2x6<f64>; 4],
    thrust_coefficient: f64,
    thrust_scale: f64,
}

/// Linearized rows of one stage: `lower <= values + jacobian dv <= upper`.
pub(crate) struct StageRows {
    pub values: RowValues,
    pub jacobian: RowJacobian,
    pub lower: RowValues,
    pub upper: RowValues,
}

impl ForceConstraints {
    pub fn new(allocator: &Allocator, limits: &ActuatorLimits) -> Self {
        let mut maps = [Matrix2x6::zeros(); 4];
        for j in 0..6 {
            let mut e = Vector6::zeros();
            e[j] = 1.0;
            let pinv = allocator.effectiveness().pinv;
            let components = RotorForceComponents(pinv * e);
            for (r, map) in maps.iter_mut().enumerate() {
                let (lateral, lift) = components.tilt_plane(r);
                map[(0, j)] = lateral;
                map[(1, j)] = lift;
            }
        }
        let k = allocator.params().thrust_coefficient;
        Self { maps, thrust_coefficient: k, thrust_scale: k * rpm_to_rad_per_s(limits.rotor_speed_max).powi(2) }
    }

    fn thrust(&self, rpm: f64) -> f64 {
        self.thrust_coefficient * rpm_to_rad_per_s(rpm).powi(2)
    }

    /// Row bounds of `stage` from the command bounds.
    fn row_bounds(&self, bounds: &StageBounds, stage: usize) -> (RowValues, RowValues) {
        let (lo, hi) = (&bounds.lower[stage], &bounds.upper[stage]);
        let mut lower = RowValues::zeros();
        let mut upper = RowValues::zeros();
        for r in 0..4 {
            // rotors 3 and 4 spin with negative speed
            let (slow, fast) = if r < 2 { (lo[r], hi[r]) } else { (-hi[r], -lo[r]) };
            lower[r] = (self.thrust(slow.max(0.0)) / self.thrust_scale).powi(2);
            upper[r] = (self.thrust(fast.max(0.0)) / self.thrust_scale).powi(2);
            lower[4 + 2 * r] = 0.0;
            upper[4 + 2 * r] = f64::INFINITY;
            lower[5 + 2 * r] = f64::NEG_INFINITY;
            upper[5 + 2 * r] = 0.0;
        }
        (lower, upper)
    }

    fn tilt_normal(angle: f64) -> RowVector2<f64> {
        RowVector2::new(angle.cos(), angle.sin())
    }

    pub fn stage_rows(&self, v: &Vector6, bounds: &StageBounds, stage: usize) -> StageRows {
        let (lower, upper) = self.row_bounds(bounds, stage);
        let mut values = RowValues::zeros();
        let mut jacobian = RowJacobian::zeros();
        let s = self.thrust_scale;
        for (r, map) in self.maps.iter().enumerate() {
            let a: Vector2<f64> = map * v;
            values[r] = a.norm_squared() / (s * s);
            jacobian.set_row(r, &(2.0 * a.transpose() * map / (s * s)));
            for (offset, angle) in [(4, bounds.lower[stage][4 + r]), (5, bounds.upper[stage][4 + r])] {
                let n = Self::tilt_normal(angle);
                let row: RowVector6<f64> = n * map / s;
                values[offset + 2 * r] = (n * a)[0] / s;
                jacobian.set_row(offset + 2 * r, &row);
            }
        }
        StageRows { values, jacobian, lower, upper }
    }

    /// Row values only.
    pub fn values(&self, v: &Vector6, bounds: &StageBounds, stage: usize) -> RowValues {
        self.stage_rows(v, bounds, stage).values
    }

    /// Sum of row violations at `v`.
    pub fn violation(&self, v: &Vector6, bounds: &StageBounds, stage: usize) -> f64 {
        let rows = self.stage_rows(v, bounds, stage);
        (0..ROWS).map(|k| (rows.lower[k] - rows.values[k]).max(0.0) + (rows.values[k] - rows.upper[k]).max(0.0)).sum()
    }

    /// Hessian of the speed row of rotor `r` (constant).
    pub fn speed_curvature(&self, r: usize) -> Matrix6<f64> {
        let s = self.thrust_scale;
        2.0 * self.maps[r].transpose() * self.maps[r] / (s * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmpc::build_stage_bounds;
    use crate::vehicle::VehicleParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_agree_with_command_bounds() {
        let params = VehicleParams::default();
        let allocator = Allocator::new(&params).unwrap();
        let limits = ActuatorLimits::default();
        let fc = ForceConstraints::new(&allocator, &limits);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hover = params.hover_wrench().to_vector();
        let (mut agree, mut inside) = (0, 0);
        for _ in 0..5000 {
            let u = allocator.h(&params.hover_wrench());
            let bounds = build_stage_bounds(&u, &limits, 0.02, 3);
            let stage = rng.gen_range(0..3);
            let v = hover
                + Vector6::from_fn(|k, _| if k < 3 { rng.gen_range(-1.5..1.5) } else { rng.gen_range(-0.08..0.08) });
            let by_rows = fc.violation(&v, &bounds, stage) == 0.0;
            let by_h = bounds.violation(stage, &allocator.h_vector(&v)) == 0.0;
            // equal except within rounding of the boundary
            let margin = bounds.violation(stage, &allocator.h_vector(&v)).abs() < 1e-9
                || fc.violation(&v, &bounds, stage) < 1e-12;
            if by_rows == by_h || margin {
                agree += 1;
            }
            if by_h {
                inside += 1;
            }
        }
        assert_eq!(agree, 5000);
        assert!(inside > 100 && inside < 4900, "{inside} samples inside");
    }

    #[test]
    fn jacobian_and_curvature_match_differences() {
        let params = VehicleParams::default();
        let allocator = Allocator::new(&params).unwrap();
        let limits = ActuatorLimits::default();
        let fc = ForceConstraints::new(&allocator, &limits);
        let bounds = build_stage_bounds(&allocator.h(&params.hover_wrench()), &limits, 0.02, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = params.hover_wrench().to_vector() + Vector6::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            let rows = fc.stage_rows(&v, &bounds, 0);
            let h = 1e-5;
            for j in 0..6 {
                let (mut vp, mut vm) = (v, v);
                vp[j] += h;
                vm[j] -= h;
                let col = (fc.values(&vp, &bounds, 0) - fc.values(&vm, &bounds, 0)) / (2.0 * h);
                for k in 0..ROWS {
                    assert!((rows.jacobian[(k, j)] - col[k]).abs() <= 1e-4 * rows.jacobian.amax().max(1e-3));
                }
                for r in 0..4 {
                    let second = (fc.values(&vp, &bounds, 0)[r] - 2.0 * rows.values[r] + fc.values(&vm, &bounds, 0)[r])
                        / (h * h);
                    let c = fc.speed_curvature(r)[(j, j)];
                    assert!((second - c).abs() <= 1e-3 * c.abs().max(1e-3), "{second} vs {c}");
                }
            }
        }
    }
}

//! Pseudo-inverse control allocation.
//!
//! The eight usable rotor force components `u' = (f1x, f1z, f2x, f2z, f3y, f3z, f4y, f4z)`
//! map linearly onto the wrench, `v = B u'`. The allocator applies the
//! minimum-norm inverse `u' = B^+ v` and then recovers rotor speed and tilt
//! from each rotor's force vector. The composition is the map `h(v)` that the
//! NMPC constrains.

use crate::linalg::{Matrix6x8, Matrix8x6, Vector6, Vector8};
use crate::vehicle::{wrench_from_rotor_forces, ActuatorCommand, VehicleParams, VirtualControl, RAD_PER_S_TO_RPM};
use crate::{Error, Result};
use nalgebra::Vector3;

/// Rotor force norm below which the rotor is treated as idle (zero speed, zero tilt).
pub const ZERO_THRUST_EPS: f64 = 1e-9;

/// Body-frame rotor force components usable for allocation, in N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorForceComponents(pub Vector8);

impl RotorForceComponents {
    /// Full 3-vectors of the four rotor forces.
    pub fn rotor_forces(&self) -> [Vector3<f64>; 4] {
        let u = &self.0;
        [
            Vector3::new(u[0], 0.0, u[1]),
            Vector3::new(u[2], 0.0, u[3]),
            Vector3::new(0.0, u[4], u[5]),
            Vector3::new(0.0, u[6], u[7]),
        ]
    }

    /// Body z component of rotor `i` (0-based).
    pub fn lift(&self, i: usize) -> f64 {
        self.0[2 * i + 1]
    }

    /// `(lateral, lift)` pair of rotor `i` (0-based) in that rotor's tilt convention:
    /// lateral is positive along the direction a positive tilt pushes, lift is the
    /// body z component.
    pub fn tilt_plane(&self, i: usize) -> (f64, f64) {
        let u = &self.0;
        match i {
            0 => (u[0], u[1]),
            1 => (-u[2], u[3]),
            2 => (u[4], u[5]),
            _ => (-u[6], u[7]),
        }
    }
}

/// Effectiveness matrix `B` (rows f_x, f_y, f_z, tau_x, tau_y, tau_z) and its pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectivenessMatrix {
    pub b: Matrix6x8,
    pub pinv: Matrix8x6,
}

/// Builds `B` column by column by pushing unit force components through the
/// plant's own force-to-wrench map, then forms `B^+` from an SVD.
pub fn build_effectiveness(params: &VehicleParams) -> Result<EffectivenessMatrix> {
    params.validate()?;
    let mut b = Matrix6x8::zeros();
    for j in 0..8 {
        let unit = RotorForceComponents(Vector8::from_fn(|i, _| if i == j { 1.0 } else { 0.0 }));
        let w = wrench_from_rotor_forces(&unit.rotor_forces(), params).to_vector();
        b.set_column(j, &w);
    }

    let svd = b.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = sigma_max * 8.0 * f64::EPSILON * 8.0;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < 6 {
        return Err(Error::RankDeficient { rank });
    }
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma_inv = svd.singular_values.map(|s| 1.0 / s);
    // B = U S V^T  =>  B^+ = V S^-1 U^T
    let pinv: Matrix8x6 = v_t.transpose() * nalgebra::Matrix6::from_diagonal(&sigma_inv) * u.transpose();
    Ok(EffectivenessMatrix { b, pinv })
}

/// Minimum-norm rotor force components reproducing `v`.
pub fn allocate(v: &VirtualControl, effectiveness: &EffectivenessMatrix) -> RotorForceComponents {
    RotorForceComponents(effectiveness.pinv * v.to_vector())
}

/// Rotor speeds and tilts that realize the given rotor force components.
pub fn extract_commands(components: &RotorForceComponents, params: &VehicleParams) -> ActuatorCommand {
    let mut cmd = ActuatorCommand::zero();
    for i in 0..4 {
        let (lateral, lift) = components.tilt_plane(i);
        let magnitude = lateral.hypot(lift);
        if magnitude < ZERO_THRUST_EPS {
            continue;
        }
        let speed = RAD_PER_S_TO_RPM * (magnitude / params.thrust_coefficient).sqrt();
        cmd.rotor_speed[i] = if i < 2 { speed } else { -speed };
        cmd.tilt[i] = lateral.atan2(-lift);
    }
    cmd
}

/// Allocator bound to one parameter set, with `B^+` precomputed.
#[derive(Debug, Clone)]
pub struct Allocator {
    params: VehicleParams,
    effectiveness: EffectivenessMatrix,
}

impl Allocator {
    pub fn new(params: &VehicleParams) -> Result<Self> {
        Ok(Self { params: *params, effectiveness: build_effectiveness(params)? })
    }

    pub fn params(&self) -> &VehicleParams {
        &self.params
    }

    pub fn effectiveness(&self) -> &EffectivenessMatrix {
        &self.effectiveness
    }

    pub fn allocate(&self, v: &VirtualControl) -> RotorForceComponents {
        allocate(v, &self.effectiveness)
    }

    /// `h(v)`: wrench to actuator command.
    pub fn h(&self, v: &VirtualControl) -> ActuatorCommand {
        extract_commands(&self.allocate(v), &self.params)
    }

    pub fn h_vector(&self, v: &Vector6) -> Vector8 {
        self.h(&VirtualControl::from_vector(v)).to_vector()
    }
}

/// Free-function form of `h(v)`.
pub fn h(v: &VirtualControl, effectiveness: &EffectivenessMatrix, params: &VehicleParams) -> ActuatorCommand {
    extract_commands(&allocate(v, effectiveness), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{propulsive_wrench, rotor_force};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SMatrix};
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn full_rank_with_default_params() {
        let e = build_effectiveness(&params()).unwrap();
        let rank = DMatrix::from_column_slice(6, 8, e.b.as_slice()).rank(1e-10);
        assert_eq!(rank, 6);
        assert!((e.b * e.pinv - SMatrix::<f64, 6, 6>::identity()).amax() < 1e-10);
    }

    // Transcription of the published effectiveness matrix; the numerically built
    // matrix must agree entry for entry under the adopted sign convention.
    #[test]
    fn matches_published_structure() {
        let p = params();
        let l = p.arm_length;
        let k = p.torque_coefficient / p.thrust_coefficient;
        #[rustfmt::skip]
        let published = Matrix6x8::from_row_slice(&[
            1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0,
            0.0, l,   0.0, -l,  0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, -l,  0.0, l,
            -l,  -k,  l,   -k,  l,   k,   -l,  k,
        ]);
        let built = build_effectiveness(&p).unwrap().b;
        for i in 0..6 {
            for j in 0..8 {
                assert_eq!(built[(i, j)] != 0.0, published[(i, j)] != 0.0, "pattern at ({i},{j})");
            }
        }
        assert_relative_eq!(built, published, epsilon = 1e-15);
    }

    #[test]
    fn zero_arm_is_rank_deficient() {
        let p = VehicleParams { arm_length: 0.0, ..params() };
        // Bypass parameter validation to exercise the rank check itself.
        assert!(build_effectiveness(&p).is_err());
        let p = VehicleParams { arm_length: 1e-300, ..params() };
        assert!(matches!(build_effectiveness(&p), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn hover_allocation() {
        let p = params();
        let alloc = Allocator::new(&p).unwrap();
        let u = alloc.allocate(&p.hover_wrench()).0;
        let quarter = -p.mass * p.gravity / 4.0;
        for i in [1, 3, 5, 7] {
            assert_relative_eq!(u[i], quarter, epsilon = 1e-12);
            assert_relative_eq!(u[i], -1.1478, epsilon = 1e-4);
        }
        for i in [0, 2, 4, 6] {
            assert!(u[i].abs() < 1e-12);
        }
        assert!((alloc.effectiveness().b * u - p.hover_wrench().to_vector()).amax() < 1e-12);
    }

    #[test]
    fn zero_maps_to_zero() {
        let alloc = Allocator::new(&params()).unwrap();
        assert_eq!(alloc.allocate(&VirtualControl::zero()).0, Vector8::zeros());
        assert_eq!(alloc.h(&VirtualControl::zero()), ActuatorCommand::zero());
    }

    #[test]
    fn hover_command() {
        let p = params();
        let alloc = Allocator::new(&p).unwrap();
        let cmd = alloc.h(&p.hover_wrench());
        let hover = 2928.996827291341;
        let expected = [hover, hover, -hover, -hover];
        for i in 0..4 {
            assert!((cmd.rotor_speed[i] - expected[i]).abs() < 1e-6);
            assert!(cmd.tilt[i].abs() < 1e-12);
        }
    }

    #[test]
    fn tilt_recovered_from_forces() {
        let p = params();
        let lift = 1.1478;
        let mut u = Vector8::zeros();
        u[0] = lift * 0.2f64.tan();
        u[1] = -lift;
        let cmd = extract_commands(&RotorForceComponents(u), &p);
        assert_relative_eq!(cmd.tilt[0], 0.2, epsilon = 1e-14);
        let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
        assert_relative_eq!(
            cmd.rotor_speed[0],
            RAD_PER_S_TO_RPM * (norm / p.thrust_coefficient).sqrt(),
            epsilon = 1e-9
        );
        // |Omega| grows as 1/sqrt(cos beta) relative to the untilted speed
        let untilted = RAD_PER_S_TO_RPM * (lift / p.thrust_coefficient).sqrt();
        assert_relative_eq!(cmd.rotor_speed[0], untilted / 0.2f64.cos().sqrt(), epsilon = 1e-9);
        assert_eq!(cmd.rotor_speed[1..], [0.0, 0.0, 0.0]);
    }

    fn lift_feasible_wrench() -> impl Strategy<Value = Vector6> {
        (-1.0..1.0f64, -1.0..1.0f64, -12.0..-2.0f64, -0.1..0.1f64, -0.1..0.1f64, -0.05..0.05f64)
            .prop_map(|(a, b, c, d, e, f)| Vector6::new(a, b, c, d, e, f))
    }

    proptest! {
        #[test]
        fn exact_reconstruction(v in prop::array::uniform6(-20.0..20.0f64)) {
            let alloc = Allocator::new(&params()).unwrap();
            let v = Vector6::from_column_slice(&v);
            let u = alloc.allocate(&VirtualControl::from_vector(&v)).0;
            let err = (alloc.effectiveness().b * u - v).norm();
            prop_assert!(err <= 1e-9 * (1.0 + v.norm()));
        }

        #[test]
        fn minimum_norm(v in prop::array::uniform6(-5.0..5.0f64), w in prop::array::uniform8(-1.0..1.0f64)) {
            let alloc = Allocator::new(&params()).unwrap();
            let e = alloc.effectiveness();
            let u = alloc.allocate(&VirtualControl::from_vector(&Vector6::from_column_slice(&v))).0;
            // project a random vector onto null(B)
            let w = Vector8::from_column_slice(&w);
            let null = w - e.pinv * (e.b * w);
            prop_assert!((e.b * null).amax() < 1e-12);
            prop_assert!(u.norm() <= (u + null).norm() + 1e-12);
        }

        #[test]
        fn round_trip_through_plant(v in lift_feasible_wrench()) {
            let p = params();
            let alloc = Allocator::new(&p).unwrap();
            let u = alloc.allocate(&VirtualControl::from_vector(&v)).0;
            prop_assume!(u[1] < 0.0 && u[3] < 0.0 && u[5] < 0.0 && u[7] < 0.0);
            let cmd = alloc.h(&VirtualControl::from_vector(&v));
            prop_assert!(cmd.has_valid_signs());
            let back = propulsive_wrench(&cmd, &p).to_vector();
            prop_assert!((back - v).norm() <= 1e-9 * v.norm());
            for b in cmd.tilt {
                prop_assert!(b.abs() < std::f64::consts::FRAC_PI_2);
            }
        }

        #[test]
        fn extraction_inverts_rotor_model(
            lat in prop::array::uniform4(-3.0..3.0f64),
            lift in prop::array::uniform4(-6.0..-0.05f64),
        ) {
            let p = params();
            let u = Vector8::from_column_slice(&[lat[0], lift[0], lat[1], lift[1], lat[2], lift[2], lat[3], lift[3]]);
            let comps = RotorForceComponents(u);
            let cmd = extract_commands(&comps, &p);
            let forces = comps.rotor_forces();
            for i in 0..4 {
                let f = rotor_force(i + 1, cmd.rotor_speed[i], cmd.tilt[i], &p).unwrap();
                prop_assert!((f - forces[i]).amax() < 1e-10);
            }
        }
    }
}

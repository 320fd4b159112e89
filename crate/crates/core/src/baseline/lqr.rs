use crate::linalg::{wrap_angle, Matrix12, Matrix12x6, Vector12, Vector6};
use crate::nmpc::{discretize_dynamics, NmpcConfig};
use crate::sim::DesiredState;
use crate::vehicle::{VehicleParams, VehicleState, VirtualControl};
use crate::{Error, Result};
use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

const DARE_TOLERANCE: f64 = 1e-10;
const DARE_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrConfig {
    pub state_weights: [f64; 12],
    pub input_weights: [f64; 6],
}

impl Default for LqrConfig {
    fn default() -> Self {
        let nmpc = NmpcConfig::default();
        Self { state_weights: nmpc.state_weights, input_weights: nmpc.input_weights }
    }
}

impl LqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("lqr: state weights must be nonnegative".into()));
        }
        if self.input_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("lqr: input weights must be positive".into()));
        }
        Ok(())
    }
}

/// Discrete-time model of the RK4 step at hover (level, at rest, hover wrench).
pub fn linearize_hover(params: &VehicleParams, dt: f64) -> Result<(Matrix12, Matrix12x6)> {
    let v = params.hover_wrench().to_vector();
    let d = discretize_dynamics(&Vector12::zeros(), &v, dt, params)?;
    Ok((d.a, d.b))
}

/// Solves the discrete algebraic Riccati equation by iterating the Riccati
/// recursion from `P = Q`. Returns `(P, K)` with `K = (R + B'PB)^-1 B'PA`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let btpa = b.transpose() * p * a;
        s.cholesky()
            .map(|c| c.solve(&btpa))
            .ok_or_else(|| Error::LinearAlgebra("R + B'PB is not positive definite".into()))
    };
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..DARE_MAX_ITERATIONS {
        let k = gain(&p)?;
        let mut next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        next = (&next + next.transpose()) * 0.5;
        residual = (&next - &p).amax() / next.amax().max(1.0);
        p = next;
        if residual <= DARE_TOLERANCE {
            let k = gain(&p)?;
            return Ok((p, k));
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(Error::RiccatiNotConverged { iterations: DARE_MAX_ITERATIONS, residual })
}

/// Synthesized gain and the model it was designed on.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub a: Matrix12,
    pub b: Matrix12x6,
    pub p: DMatrix<f64>,
    pub k: SMatrix<f64, 6, 12>,
    pub hover_wrench: Vector6,
    pub config: LqrConfig,
}

impl LqrDesign {
    pub fn new(config: &LqrConfig, params: &VehicleParams, dt: f64) -> Result<Self> {
        config.validate()?;
        let (a, b) = linearize_hover(params, dt)?;
        let ad = DMatrix::from_column_slice(12, 12, a.as_slice());
        let bd = DMatrix::from_column_slice(12, 6, b.as_slice());
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&config.state_weights));
        let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&config.input_weights));
        let (p, k) = dare_solve(&ad, &bd, &q, &r)?;
        Ok(Self {
            a,
            b,
            p,
            k: SMatrix::<f64, 6, 12>::from_column_slice(k.as_slice()),
            hover_wrench: params.hover_wrench().to_vector(),
            config: config.clone(),
        })
    }

    /// Spectral radius of `A - B K`.
    pub fn closed_loop_spectral_radius(&self) -> f64 {
        let cl = self.a - self.b * self.k;
        cl.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
    }
}

/// `v = v_hover - K (x - x_d)` with the attitude error wrapped. No
/// feasibility projection is applied.
pub fn lqr_control(state: &VehicleState, desired: &DesiredState, design: &LqrDesign) -> VirtualControl {
    let mut e = state.to_vector() - desired.to_state_vector();
    for k in 3..6 {
        e[k] = wrap_angle(e[k]);
    }
    VirtualControl::from_vector(&(design.hover_wrench - design.k * e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrController {
    design: LqrDesign,
}

impl LqrController {
    pub fn new(config: &LqrConfig, params: &VehicleParams, dt: f64) -> Result<Self> {
        Ok(Self { design: LqrDesign::new(config, params, dt)? })
    }

    pub fn design(&self) -> &LqrDesign {
        &self.design
    }

    pub fn control(&self, state: &VehicleState, desired: &DesiredState) -> VirtualControl {
        lqr_control(state, desired, &self.design)
    }
}

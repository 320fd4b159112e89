use super::constraints::{ForceConstraints, RowValues, ROWS};
use super::qp::{kkt_residual, solve_qp, QpProblem, QpSolution, QpStatus};
use super::{EffortReference, HorizonSolution, MeritStep, NmpcConfig, SolveStatus, SolverDiagnostics, StageBounds};
use crate::allocator::Allocator;
use crate::linalg::{wrap_angle, Matrix12, Matrix12x6, Matrix8x6, Vector12, Vector6, Vector8};
use crate::sim::DesiredState;
use crate::vehicle::{
    rotation_body_to_inertial, state_derivative, ActuatorCommand, ActuatorLimits, Disturbance, VehicleParams,
    VehicleState, VirtualControl,
};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Forward-difference step for all Jacobians.
const FD_STEP: f64 = 1e-6;
/// Lift magnitude below which a rotor's tilt row of `dh/dv` is frozen, N.
const LIFT_EPS: f64 = 1e-6;
/// Penalty on the shared slack of the relaxed QP (linear and quadratic).
const SLACK_WEIGHT: f64 = 1e6;
/// Exact-penalty weight on shooting defects and bound violations in the merit:
/// at least `PENALTY_MIN`, raised to `PENALTY_SAFETY` times the largest QP
/// multiplier and never lowered within one solve.
const PENALTY_MIN: f64 = 1.0;
const PENALTY_SAFETY: f64 = 10.0;
const MAX_BACKTRACKS: usize = 12;
/// Projection steps that move a wrench into the bounds of its stage.
const MAX_RESTORATION: usize = 20;
/// Second-order corrections tried before backtracking a rejected full step.
const MAX_CORRECTIONS: usize = 3;
/// Box trust region on the wrench increments (N and N m): initial radius and
/// range. The linearized allocation is only accurate near the iterate; the
/// radius doubles after a full step that reached it and shrinks to a quarter
/// of the step length after backtracking.
const RADIUS_INITIAL: f64 = 0.5;
const RADIUS_MIN: f64 = 1e-6;
const RADIUS_MAX: f64 = 100.0;

/// Per-stage bounds: the window reachable after `(i + 1) dt` from `u_now`,
/// intersected with the absolute box.
pub fn build_stage_bounds(u_now: &ActuatorCommand, limits: &ActuatorLimits, dt: f64, horizon: usize) -> StageBounds {
    let u = u_now.to_vector();
    let (lower, upper) = (0..horizon).map(|i| limits.reachable_window(&u, (i + 1) as f64 * dt)).unzip();
    StageBounds { lower, upper }
}

/// RK4 over `dt` without angle wrapping, so finite differences stay smooth.
fn rk4(x: &Vector12, v: &Vector6, dt: f64, params: &VehicleParams) -> Result<Vector12> {
    let wrench = VirtualControl::from_vector(v);
    let d = Disturbance::zero();
    let f = |x: &Vector12| state_derivative(&VehicleState::from_vector(x), &wrench, &d, params);
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (0.5 * dt)))?;
    let k3 = f(&(x + k2 * (0.5 * dt)))?;
    let k4 = f(&(x + k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// One-step prediction and its Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub next: Vector12,
    pub a: Matrix12,
    pub b: Matrix12x6,
}

/// Disturbance-free RK4 step with forward-difference Jacobians.
pub fn discretize_dynamics(x: &Vector12, v: &Vector6, dt: f64, params: &VehicleParams) -> Result<Discretization> {
    let next = rk4(x, v, dt, params)?;
    let mut a = Matrix12::zeros();
    for j in 0..12 {
        let mut xp = *x;
        xp[j] += FD_STEP;
        a.set_column(j, &((rk4(&xp, v, dt, params)? - next) / FD_STEP));
    }
    let mut b = Matrix12x6::zeros();
    for j in 0..6 {
        let mut vp = *v;
        vp[j] += FD_STEP;
        b.set_column(j, &((rk4(x, &vp, dt, params)? - next) / FD_STEP));
    }
    Ok(Discretization { next, a, b })
}

/// `u = h(v)` and a forward-difference `dh/dv`. Tilt rows of rotors with
/// vanishing lift are zeroed; the returned flags mark them.
pub fn linearize_h(v: &Vector6, allocator: &Allocator) -> (Vector8, Matrix8x6, [bool; 4]) {
    let u = allocator.h_vector(v);
    let mut g = Matrix8x6::zeros();
    for j in 0..6 {
        let mut vp = *v;
        vp[j] += FD_STEP;
        g.set_column(j, &((allocator.h_vector(&vp) - u) / FD_STEP));
    }
    let components = allocator.allocate(&VirtualControl::from_vector(v));
    let mut frozen = [false; 4];
    for (i, flag) in frozen.iter_mut().enumerate() {
        if components.lift(i).abs() < LIFT_EPS {
            *flag = true;
            g.row_mut(4 + i).fill(0.0);
        }
    }
    (u, g, frozen)
}

/// Wrench penalized as zero effort at a reference sample.
pub fn effort_reference(desired: &DesiredState, mode: EffortReference, params: &VehicleParams) -> Vector6 {
    match mode {
        EffortReference::Zero => Vector6::zeros(),
        EffortReference::Trim => {
            let r = rotation_body_to_inertial(&desired.attitude);
            let inertial = (desired.acceleration - params.gravity_vector()) * params.mass
                + params.translational_drag_matrix() * desired.velocity;
            let force = r.transpose() * inertial;
            Vector6::new(force[0], force[1], force[2], 0.0, 0.0, 0.0)
        }
    }
}

/// Difference of two states with the attitude part wrapped.
fn state_error(a: &Vector12, b: &Vector12) -> Vector12 {
    let mut e = a - b;
    for k in 3..6 {
        e[k] = wrap_angle(e[k]);
    }
    e
}

struct Problem<'a> {
    x0: Vector12,
    x_ref: Vec<Vector12>,
    v_ref: Vec<Vector6>,
    bounds: StageBounds,
    rows: ForceConstraints,
    config: &'a NmpcConfig,
    allocator: &'a Allocator,
}

#[derive(Debug, Clone, Copy)]
struct Merit {
    cost: f64,
    defect: f64,
    violation: f64,
}

impl Merit {
    fn value(&self, penalty: f64) -> f64 {
        self.cost + penalty * (self.defect + self.violation)
    }
}

impl Problem<'_> {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn params(&self) -> &VehicleParams {
        self.allocator.params()
    }

    /// Running cost over stages `0..N-1`; the state term of stage 0 is constant
    /// and omitted.
    fn cost(&self, xs: &[Vector12], vs: &[Vector6]) -> f64 {
        let q = &self.config.state_weights;
        let r = &self.config.input_weights;
        let mut total = 0.0;
        for i in 1..self.horizon() {
            let e = state_error(&xs[i], &self.x_ref[i]);
            total += (0..12).map(|k| q[k] * e[k] * e[k]).sum::<f64>();
        }
        for (i, v) in vs.iter().enumerate() {
            let d = v - self.v_ref[i];
            total += (0..6).map(|k| r[k] * d[k] * d[k]).sum::<f64>();
        }
        total
    }

    /// Row violations of all stages.
    fn violation(&self, vs: &[Vector6]) -> f64 {
        vs.iter().enumerate().map(|(i, v)| self.rows.violation(v, &self.bounds, i)).sum()
    }

    fn defects(&self, xs: &[Vector12], vs: &[Vector6]) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.horizon() {
            let next = rk4(&xs[i], &vs[i], self.config.dt, self.params())?;
            total += state_error(&next, &xs[i + 1]).lp_norm(1);
        }
        Ok(total)
    }

    fn merit(&self, xs: &[Vector12], vs: &[Vector6]) -> Option<Merit> {
        let defect = self.defects(xs, vs).ok()?;
        let violation = self.violation(vs);
        let cost = self.cost(xs, vs);
        (cost + defect + violation).is_finite().then_some(Merit { cost, defect, violation })
    }

    fn rollout(&self, vs: &[Vector6]) -> Result<Vec<Vector12>> {
        let mut xs = Vec::with_capacity(vs.len() + 1);
        xs.push(self.x0);
        for v in vs {
            let next = rk4(xs.last().expect("nonempty"), v, self.config.dt, self.params())?;
            xs.push(next);
        }
        Ok(xs)
    }
}

/// Dense QP of one SQP iteration, condensed onto the wrench increments.
struct Subproblem {
    qp: QpProblem,
    /// `dx(i) = sens[i] dv + offset[i]` for `i = 0..=N`.
    sens: Vec<DMatrix<f64>>,
    offset: Vec<DVector<f64>>,
    /// Stage transition Jacobians `A(i)`.
    a: Vec<DMatrix<f64>>,
    /// Weighted state errors `2 Q e(i)` at the linearization point, `i = 0..N`.
    weighted_error: Vec<DVector<f64>>,
    /// Constraint row values at the linearization point.
    row_values: Vec<RowValues>,
}

/// `speed_multipliers` holds the multipliers of the rotor speed rows from the
/// previous QP (signed, negative at an upper bound); the convex part of their
/// curvature is added to the Gauss-Newton Hessian.
fn build_subproblem(p: &Problem, xs: &[Vector12], vs: &[Vector6], speed_multipliers: &[f64]) -> Result<Subproblem> {
    let n = p.horizon();
    let nv = 6 * n;
    let dt = p.config.dt;
    let q = &p.config.state_weights;
    let r = &p.config.input_weights;

    let mut sens = Vec::with_capacity(n + 1);
    let mut offset = Vec::with_capacity(n + 1);
    let mut transitions = Vec::with_capacity(n);
    sens.push(DMatrix::zeros(12, nv));
    offset.push(DVector::zeros(12));
    for i in 0..n {
        let disc = discretize_dynamics(&xs[i], &vs[i], dt, p.params())?;
        let a = DMatrix::from_column_slice(12, 12, disc.a.as_slice());
        let mut s = &a * &sens[i];
        s.view_mut((0, 6 * i), (12, 6)).copy_from(&disc.b);
        let defect = state_error(&disc.next, &xs[i + 1]);
        let o = &a * &offset[i] + DVector::from_column_slice(defect.as_slice());
        sens.push(s);
        offset.push(o);
        transitions.push(a);
    }

    let mut weighted_error = vec![DVector::zeros(12); n + 1];
    let mut hessian = DMatrix::zeros(nv, nv);
    let mut gradient = DVector::zeros(nv);
    for i in 0..n {
        for k in 0..6 {
            hessian[(6 * i + k, 6 * i + k)] = 2.0 * r[k];
            gradient[6 * i + k] = 2.0 * r[k] * (vs[i][k] - p.v_ref[i][k]);
        }
    }
    for i in 1..n {
        let e = state_error(&xs[i], &p.x_ref[i]);
        let mut qs = sens[i].clone();
        for row in 0..12 {
            qs.row_mut(row).scale_mut(q[row]);
        }
        hessian += 2.0 * sens[i].transpose() * &qs;
        let resid = DVector::from_fn(12, |row, _| q[row] * (e[row] + offset[i][row]));
        gradient += 2.0 * sens[i].transpose() * resid;
        weighted_error[i] = DVector::from_fn(12, |row, _| 2.0 * q[row] * e[row]);
    }

    for i in 0..n {
        for r in 0..4 {
            let lambda = speed_multipliers.get(4 * i + r).copied().unwrap_or(0.0);
            if lambda < 0.0 {
                let mut block = hessian.view_mut((6 * i, 6 * i), (6, 6));
                block += p.rows.speed_curvature(r) * (-lambda);
            }
        }
    }

    let mut c = DMatrix::zeros(ROWS * n, nv);
    let mut lower = DVector::zeros(ROWS * n);
    let mut upper = DVector::zeros(ROWS * n);
    let mut row_values = Vec::with_capacity(n);
    for i in 0..n {
        let rows = p.rows.stage_rows(&vs[i], &p.bounds, i);
        c.view_mut((ROWS * i, 6 * i), (ROWS, 6)).copy_from(&rows.jacobian);
        for k in 0..ROWS {
            lower[ROWS * i + k] = rows.lower[k] - rows.values[k];
            upper[ROWS * i + k] = rows.upper[k] - rows.values[k];
        }
        row_values.push(rows.values);
    }

    Ok(Subproblem {
        qp: QpProblem::unconstrained(hessian, gradient).with_inequalities(c, lower, upper),
        sens,
        offset,
        a: transitions,
        weighted_error,
        row_values,
    })
}

/// Largest multiplier of the shooting constraints `x(i+1) = F(x(i), v(i))`
/// at the QP solution, from the backward recursion
/// `lambda(i) = 2 Q (e(i) + dx(i)) + A(i)' lambda(i+1)`, `lambda(N) = 0`.
fn largest_costate(sub: &Subproblem, step: &Step, q: &[f64; 12]) -> f64 {
    let n = sub.a.len();
    let mut lambda = DVector::zeros(12);
    let mut largest = 0.0_f64;
    for i in (1..n).rev() {
        let dx = DVector::from_fn(12, |row, _| 2.0 * q[row] * step.dxs[i][row]);
        lambda = &sub.weighted_error[i] + dx + sub.a[i].transpose() * &lambda;
        largest = largest.max(lambda.amax());
    }
    largest
}

/// Search direction of one QP solution: wrench and predicted state increments.
#[derive(Clone)]
struct Step {
    dxs: Vec<Vector12>,
    dvs: Vec<Vector6>,
    norm: f64,
}

impl Step {
    fn new(sub: &Subproblem, dv: &DVector<f64>, n: usize) -> Self {
        let dxs: Vec<Vector12> =
            (0..=n).map(|i| Vector12::from_iterator((&sub.sens[i] * dv + &sub.offset[i]).iter().copied())).collect();
        let dvs: Vec<Vector6> = (0..n).map(|i| Vector6::from_iterator(dv.rows(6 * i, 6).iter().copied())).collect();
        let norm = dv.amax().max(dxs.iter().map(|d| d.amax()).fold(0.0, f64::max));
        Self { dxs, dvs, norm }
    }
}

/// Second-order correction: shifts the linearized bounds by the error of the
/// linear constraint model along `step`, so that the corrected step accounts
/// for the curvature of the speed rows.
fn corrected_qp(p: &Problem, sub: &Subproblem, vs: &[Vector6], step: &Step) -> Option<QpProblem> {
    let mut out = sub.qp.clone();
    for (i, (v, dv)) in vs.iter().zip(&step.dvs).enumerate() {
        let actual = p.rows.values(&(v + dv), &p.bounds, i);
        let jacobian = sub.qp.ineq_matrix.view((ROWS * i, 6 * i), (ROWS, 6));
        let predicted = sub.row_values[i] + jacobian * dv;
        for k in 0..ROWS {
            let e = actual[k] - predicted[k];
            if !e.is_finite() {
                return None;
            }
            out.ineq_lower[ROWS * i + k] -= e;
            out.ineq_upper[ROWS * i + k] -= e;
        }
    }
    Some(out)
}

/// Signed multipliers of the constraint rows (positive at a lower bound).
fn row_multipliers(sol: &QpSolution, rows: usize, relaxed_total: Option<usize>) -> Vec<f64> {
    match relaxed_total {
        None => sol.ineq_multipliers.rows(0, rows).iter().copied().collect(),
        Some(m) => (0..rows).map(|k| sol.ineq_multipliers[k] + sol.ineq_multipliers[m + k]).collect(),
    }
}

/// Re-solves `qp` with all inequality rows relaxed by one shared slack `s >= 0`
/// priced at `SLACK_WEIGHT (s + s^2 / 2)`. Returns the increments without `s`.
fn solve_relaxed(qp: &QpProblem) -> QpSolution {
    let nv = qp.dim();
    let m = qp.ineq_lower.len();
    let mut hessian = DMatrix::zeros(nv + 1, nv + 1);
    hessian.view_mut((0, 0), (nv, nv)).copy_from(&qp.hessian);
    hessian[(nv, nv)] = SLACK_WEIGHT;
    let mut gradient = DVector::zeros(nv + 1);
    gradient.rows_mut(0, nv).copy_from(&qp.gradient);
    gradient[nv] = SLACK_WEIGHT;

    // rows: C dv + s >= lower, C dv - s <= upper, s >= 0
    let mut c = DMatrix::zeros(2 * m + 1, nv + 1);
    let mut lo = DVector::from_element(2 * m + 1, f64::NEG_INFINITY);
    let mut hi = DVector::from_element(2 * m + 1, f64::INFINITY);
    for row in 0..m {
        c.view_mut((row, 0), (1, nv)).copy_from(&qp.ineq_matrix.row(row));
        c[(row, nv)] = 1.0;
        lo[row] = qp.ineq_lower[row];
        c.view_mut((m + row, 0), (1, nv)).copy_from(&qp.ineq_matrix.row(row));
        c[(m + row, nv)] = -1.0;
        hi[m + row] = qp.ineq_upper[row];
    }
    c[(2 * m, nv)] = 1.0;
    lo[2 * m] = 0.0;
    let relaxed = QpProblem::unconstrained(hessian, gradient).with_inequalities(c, lo, hi);
    let mut sol = solve_qp(&relaxed);
    sol.z = sol.z.rows(0, nv).into_owned();
    sol
}

/// Moves `v` the shortest distance (to first order) into the bounds of `stage`
/// by repeated linearized projections. Returns whether `v` changed.
fn restore_stage(v: &mut Vector6, stage: usize, bounds: &StageBounds, allocator: &Allocator) -> bool {
    let start = *v;
    for _ in 0..MAX_RESTORATION {
        if bounds.violation(stage, &allocator.h_vector(v)) <= 0.0 {
            break;
        }
        let (u, g, frozen) = linearize_h(v, allocator);
        let mut lower = DVector::from_element(8, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(8, f64::INFINITY);
        for c in 0..8 {
            if c >= 4 && frozen[c - 4] {
                continue;
            }
            lower[c] = bounds.lower[stage][c] - u[c];
            upper[c] = bounds.upper[stage][c] - u[c];
        }
        let qp = QpProblem::unconstrained(DMatrix::identity(6, 6), DVector::zeros(6)).with_inequalities(
            DMatrix::from_column_slice(8, 6, g.as_slice()),
            lower,
            upper,
        );
        let sol = solve_qp(&qp);
        if sol.status != QpStatus::Optimal {
            break;
        }
        *v += Vector6::from_column_slice(sol.z.as_slice());
    }
    *v != start
}

fn initial_guess(p: &Problem, warm: Option<&HorizonSolution>) -> Result<(Vec<Vector12>, Vec<Vector6>)> {
    let n = p.horizon();
    if let Some(w) = warm {
        let usable = w.controls.len() == n
            && w.states.len() == n
            && w.controls.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && w.states.iter().all(|x| x.iter().all(|c| c.is_finite()));
        if usable {
            let mut xs = Vec::with_capacity(n + 1);
            xs.push(p.x0);
            xs.extend(w.states.iter().copied());
            let mut vs = w.controls.clone();
            for (i, v) in vs.iter_mut().enumerate() {
                restore_stage(v, i, &p.bounds, p.allocator);
            }
            return Ok((xs, vs));
        }
    }
    let mut vs = p.v_ref.clone();
    for (i, v) in vs.iter_mut().enumerate() {
        restore_stage(v, i, &p.bounds, p.allocator);
    }
    let xs = p.rollout(&vs)?;
    Ok((xs, vs))
}

/// Solves the horizon problem from `x0`.
///
/// `reference` holds `N + 1` samples starting at the current time. `warm` is
/// used as the initial guess as-is (see [`HorizonSolution::shifted`]).
pub fn nmpc_solve(
    x0: &VehicleState,
    reference: &[DesiredState],
    u_now: &ActuatorCommand,
    warm: Option<&HorizonSolution>,
    config: &NmpcConfig,
    limits: &ActuatorLimits,
    allocator: &Allocator,
) -> Result<HorizonSolution> {
    config.validate()?;
    let n = config.horizon;
    if reference.len() != n + 1 {
        return Err(Error::InvalidParameter(format!(
            "reference window has {} samples, expected {}",
            reference.len(),
            n + 1
        )));
    }
    if !x0.is_finite() {
        return Err(Error::InvalidParameter("non-finite initial state".into()));
    }
    let params = allocator.params();
    let problem = Problem {
        x0: x0.to_vector(),
        x_ref: reference.iter().map(DesiredState::to_state_vector).collect(),
        v_ref: reference[..n].iter().map(|r| effort_reference(r, config.effort_reference, params)).collect(),
        bounds: build_stage_bounds(u_now, limits, config.dt, n),
        rows: ForceConstraints::new(allocator, limits),
        config,
        allocator,
    };

    let (mut xs, mut vs) = initial_guess(&problem, warm)?;
    let mut merit =
        problem.merit(&xs, &vs).ok_or_else(|| Error::InvalidParameter("initial guess is not finite".into()))?;
    let mut diagnostics = SolverDiagnostics {
        status: SolveStatus::Failed,
        sqp_iterations: 0,
        kkt_residual: f64::NAN,
        qp_status: QpStatus::Optimal,
        active_set_size: 0,
        relaxed: false,
        restored: false,
        merit_history: Vec::new(),
        penalty: PENALTY_MIN,
        constraint_residual: f64::NAN,
        defect_residual: f64::NAN,
    };

    let mut accepted_any = false;
    let mut status = SolveStatus::IterationLimit;
    let mut radius = RADIUS_INITIAL;
    let mut speed_multipliers: Vec<f64> = Vec::new();
    for _ in 0..config.max_sqp_iterations {
        diagnostics.sqp_iterations += 1;
        let mut sub = build_subproblem(&problem, &xs, &vs, &speed_multipliers)?;
        let constraint_rows = sub.qp.ineq_matrix.nrows();
        let box_radius = DVector::from_element(sub.qp.dim(), radius);
        sub.qp = sub.qp.with_bounds(&(-&box_radius), &box_radius);
        let mut sol = solve_qp(&sub.qp);
        diagnostics.relaxed = false;
        let mut relaxed_total = None;
        if sol.status == QpStatus::Infeasible {
            sol = solve_relaxed(&sub.qp);
            diagnostics.relaxed = true;
            relaxed_total = Some(sub.qp.ineq_matrix.nrows());
        }
        diagnostics.qp_status = sol.status;
        diagnostics.active_set_size = sol.active_set_size;
        if sol.status != QpStatus::Optimal {
            status = if accepted_any { SolveStatus::Stalled } else { SolveStatus::Failed };
            break;
        }
        diagnostics.kkt_residual = if diagnostics.relaxed { 0.0 } else { kkt_residual(&sub.qp, &sol) };

        let full = Step::new(&sub, &sol.z, n);
        let multipliers = row_multipliers(&sol, constraint_rows, relaxed_total);
        let multiplier = multipliers.iter().fold(0.0f64, |a, m| a.max(m.abs())).max(largest_costate(
            &sub,
            &full,
            &config.state_weights,
        ));
        speed_multipliers = (0..n).flat_map(|i| multipliers[ROWS * i..ROWS * i + 4].to_vec()).collect();
        let penalty = diagnostics.penalty.max(PENALTY_SAFETY * multiplier);
        diagnostics.penalty = penalty;
        let current = merit.value(penalty);
        let trial = |step: &Step, alpha: f64| {
            let trial_x: Vec<Vector12> = xs.iter().zip(&step.dxs).map(|(x, d)| x + d * alpha).collect();
            let trial_v: Vec<Vector6> = vs.iter().zip(&step.dvs).map(|(v, d)| v + d * alpha).collect();
            problem.merit(&trial_x, &trial_v).filter(|m| m.value(penalty) <= current).map(|m| (trial_x, trial_v, m))
        };

        let mut alpha = 1.0;
        let mut step_norm = full.norm;
        let mut accepted = trial(&full, 1.0);
        if accepted.is_none() && !diagnostics.relaxed {
            let mut correction = full.clone();
            for _ in 0..MAX_CORRECTIONS {
                let Some(qp) = corrected_qp(&problem, &sub, &vs, &correction) else { break };
                let corrected = solve_qp(&qp);
                if corrected.status != QpStatus::Optimal {
                    break;
                }
                correction = Step::new(&sub, &corrected.z, n);
                accepted = trial(&correction, 1.0);
                if accepted.is_some() {
                    step_norm = correction.norm;
                    break;
                }
            }
        }
        while accepted.is_none() && alpha > 0.5f64.powi(MAX_BACKTRACKS as i32) {
            alpha *= 0.5;
            accepted = trial(&full, alpha);
        }
        let Some((nx, nv, m)) = accepted else {
            status = if accepted_any || merit.violation + merit.defect <= config.constraint_tolerance {
                SolveStatus::Stalled
            } else {
                SolveStatus::Failed
            };
            break;
        };
        let wrench_step = sol.z.amax();
        radius = if alpha < 1.0 {
            (0.25 * wrench_step).max(RADIUS_MIN)
        } else if wrench_step >= 0.99 * radius {
            (2.0 * radius).min(RADIUS_MAX)
        } else {
            radius
        };
        xs = nx;
        vs = nv;
        merit = m;
        accepted_any = true;
        diagnostics.merit_history.push(MeritStep { penalty, before: current, after: m.value(penalty) });
        if alpha * step_norm < config.step_tolerance && merit.violation + merit.defect <= config.constraint_tolerance {
            status = SolveStatus::Converged;
            break;
        }
    }
    if config.max_sqp_iterations == 0 {
        status = SolveStatus::Failed;
    }
    diagnostics.status = status;
    diagnostics.defect_residual = merit.defect;
    if status != SolveStatus::Failed {
        diagnostics.restored = restore_stage(&mut vs[0], 0, &problem.bounds, allocator);
    }

    let states = problem.rollout(&vs)?;
    let commands: Vec<Vector8> = vs.iter().map(|v| allocator.h_vector(v)).collect();
    diagnostics.constraint_residual =
        commands.iter().enumerate().map(|(i, u)| problem.bounds.violation(i, u)).fold(0.0, f64::max);
    Ok(HorizonSolution { controls: vs, states: states[1..].to_vec(), commands, bounds: problem.bounds, diagnostics })
}

/// Result of one closed-loop controller update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Command sent to the actuators, inside the stage-0 window.
    pub command: ActuatorCommand,
    /// First-stage wrench of the horizon solution.
    pub wrench: VirtualControl,
    /// Stage-0 bound violation of `h(v(0))` before the final projection.
    pub stage0_residual: f64,
    /// True when the solver failed and the previous command was held.
    pub held: bool,
    pub solution: HorizonSolution,
}

/// Solves the horizon problem and returns the first-stage command together with
/// the shifted solution for the next call.
///
/// On solver failure the previous command is held.
pub fn controller_step(
    x0: &VehicleState,
    reference: &[DesiredState],
    u_prev: &ActuatorCommand,
    warm: Option<&HorizonSolution>,
    config: &NmpcConfig,
    limits: &ActuatorLimits,
    allocator: &Allocator,
) -> Result<(StepOutput, Option<HorizonSolution>)> {
    let solution = nmpc_solve(x0, reference, u_prev, warm, config, limits, allocator)?;
    if solution.diagnostics.status == SolveStatus::Failed {
        let output = StepOutput {
            command: *u_prev,
            wrench: VirtualControl::from_vector(&solution.controls[0]),
            stage0_residual: 0.0,
            held: true,
            solution,
        };
        return Ok((output, None));
    }
    let u0 = solution.commands[0];
    let stage0_residual = solution.bounds.violation(0, &u0);
    // Rounding-level violations are projected so the plant limiter never engages.
    let command = ActuatorCommand::from_vector(&solution.bounds.clamp(0, &u0));
    let next_warm = solution.shifted();
    let output = StepOutput {
        command,
        wrench: VirtualControl::from_vector(&solution.controls[0]),
        stage0_residual,
        held: false,
        solution,
    };
    Ok((output, Some(next_warm)))
}

/// Stateful NMPC loop: owns the allocator and the warm start.
#[derive(Debug, Clone)]
pub struct NmpcController {
    config: NmpcConfig,
    limits: ActuatorLimits,
    allocator: Allocator,
    warm: Option<HorizonSolution>,
}

impl NmpcController {
    pub fn new(config: NmpcConfig, limits: ActuatorLimits, params: &VehicleParams) -> Result<Self> {
        config.validate()?;
        limits.validate()?;
        Ok(Self { config, limits, allocator: Allocator::new(params)?, warm: None })
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.config
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn step(
        &mut self,
        x0: &VehicleState,
        reference: &[DesiredState],
        u_prev: &ActuatorCommand,
    ) -> Result<StepOutput> {
        let (output, warm) =
            controller_step(x0, reference, u_prev, self.warm.as_ref(), &self.config, &self.limits, &self.allocator)?;
        self.warm = warm;
        Ok(output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::sluggish_lemniscate_reference;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VehicleParams, ActuatorLimits, Allocator) {
        let params = VehicleParams::default();
        let allocator = Allocator::new(&params).unwrap();
        (params, ActuatorLimits::default(), allocator)
    }

    fn hover_command(allocator: &Allocator) -> ActuatorCommand {
        allocator.h(&allocator.params().hover_wrench())
    }

    fn wide_limits() -> ActuatorLimits {
        ActuatorLimits { rotor_rate_max: 1e7, tilt_rate_max: 1e4, ..ActuatorLimits::default() }
    }

    fn hold(p: Vector3<f64>, n: usize) -> Vec<DesiredState> {
        vec![DesiredState::hover(p); n + 1]
    }

    #[test]
    fn stage_bounds_grow_with_stage() {
        let (_, limits, allocator) = setup();
        let u = hover_command(&allocator);
        let b = build_stage_bounds(&u, &limits, 0.02, 5);
        assert_eq!(b.len(), 5);
        // 8000 rpm/s and 5 rad/s over 20 ms
        assert_relative_eq!(b.lower[0][0], u.rotor_speed[0] - 160.0, epsilon = 1e-9);
        assert_relative_eq!(b.upper[0][0], u.rotor_speed[0] + 160.0, epsilon = 1e-9);
        assert_relative_eq!(b.lower[0][0], 2768.996827291341, epsilon = 1e-6);
        assert_relative_eq!(b.upper[0][2], -2768.996827291341, epsilon = 1e-6);
        assert_relative_eq!(b.upper[0][4], 0.1, epsilon = 1e-15);
        assert_relative_eq!(b.upper[4][4], 0.5, epsilon = 1e-15);
        assert_relative_eq!(b.lower[4][1], u.rotor_speed[1] - 800.0, epsilon = 1e-9);
    }

    #[test]
    fn far_stage_bounds_reach_the_box() {
        let (_, limits, allocator) = setup();
        let b = build_stage_bounds(&hover_command(&allocator), &limits, 0.1, 10);
        let (lo, hi) = limits.absolute_box();
        assert_eq!(b.lower[9], lo);
        assert_eq!(b.upper[9], hi);
    }

    #[test]
    fn stage_bounds_collapse_as_dt_vanishes() {
        let (_, limits, allocator) = setup();
        let u = hover_command(&allocator).to_vector();
        let b = build_stage_bounds(&ActuatorCommand::from_vector(&u), &limits, 1e-12, 3);
        for i in 0..3 {
            assert!((b.lower[i] - u).amax() < 1e-7);
            assert!((b.upper[i] - u).amax() < 1e-7);
        }
    }

    fn random_state(rng: &mut ChaCha8Rng) -> Vector12 {
        Vector12::from_fn(|k, _| match k {
            0..=2 => rng.gen_range(-2.0..2.0),
            3..=5 => rng.gen_range(-0.5..0.5),
            _ => rng.gen_range(-1.0..1.0),
        })
    }

    fn random_wrench(rng: &mut ChaCha8Rng, params: &VehicleParams) -> Vector6 {
        params.hover_wrench().to_vector()
            + Vector6::from_fn(|k, _| if k < 3 { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-0.05..0.05) })
    }

    fn close(fd: f64, cd: f64, scale: f64) -> bool {
        (fd - cd).abs() <= 1e-4 * scale.max(1.0)
    }

    #[test]
    fn dynamics_jacobians_match_central_differences() {
        let (params, _, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..20 {
            let x = random_state(&mut rng);
            let v = random_wrench(&mut rng, &params);
            let d = discretize_dynamics(&x, &v, 0.02, &params).unwrap();
            let scale_a = d.a.amax();
            for j in 0..12 {
                let (mut xp, mut xm) = (x, x);
                xp[j] += h;
                xm[j] -= h;
                let col = (rk4(&xp, &v, 0.02, &params).unwrap() - rk4(&xm, &v, 0.02, &params).unwrap()) / (2.0 * h);
                for r in 0..12 {
                    assert!(close(d.a[(r, j)], col[r], scale_a), "A[{r},{j}]: {} vs {}", d.a[(r, j)], col[r]);
                }
            }
            let scale_b = d.b.amax();
            for j in 0..6 {
                let (mut vp, mut vm) = (v, v);
                vp[j] += h;
                vm[j] -= h;
                let col = (rk4(&x, &vp, 0.02, &params).unwrap() - rk4(&x, &vm, 0.02, &params).unwrap()) / (2.0 * h);
                for r in 0..12 {
                    assert!(close(d.b[(r, j)], col[r], scale_b), "B[{r},{j}]: {} vs {}", d.b[(r, j)], col[r]);
                }
            }
        }
    }

    #[test]
    fn allocation_jacobian_matches_central_differences() {
        let (params, _, allocator) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let v = random_wrench(&mut rng, &params);
            let (_, g, frozen) = linearize_h(&v, &allocator);
            assert_eq!(frozen, [false; 4]);
            for j in 0..6 {
                let (mut vp, mut vm) = (v, v);
                vp[j] += h;
                vm[j] -= h;
                let col = (allocator.h_vector(&vp) - allocator.h_vector(&vm)) / (2.0 * h);
                for r in 0..8 {
                    // rpm rows and rad rows are compared on their own scales
                    let scale = g.rows(if r < 4 { 0 } else { 4 }, 4).amax();
                    assert!(close(g[(r, j)], col[r], scale), "G[{r},{j}]: {} vs {}", g[(r, j)], col[r]);
                }
            }
        }
    }

    #[test]
    fn allocation_jacobian_at_hover() {
        let (params, _, allocator) = setup();
        let (u, g, frozen) = linearize_h(&params.hover_wrench().to_vector(), &allocator);
        assert_eq!(u, hover_command(&allocator).to_vector());
        assert_eq!(frozen, [false; 4]);
        // more lift (more negative f_z) speeds up every rotor
        for i in 0..4 {
            let sign = if i < 2 { 1.0 } else { -1.0 };
            assert!(sign * g[(i, 2)] < 0.0);
        }
        // pure vertical force does not tilt
        for i in 4..8 {
            assert!(g[(i, 2)].abs() < 1e-6);
        }
    }

    #[test]
    fn zero_thrust_freezes_tilt_rows() {
        let (_, _, allocator) = setup();
        let (u, g, frozen) = linearize_h(&Vector6::zeros(), &allocator);
        assert_eq!(frozen, [true; 4]);
        assert_eq!(u, Vector8::zeros());
        assert!(g.rows(4, 4).iter().all(|c| *c == 0.0));
    }

    #[test]
    fn hover_is_near_optimal() {
        let (params, _, allocator) = setup();
        let config = NmpcConfig::default();
        let p = Vector3::new(0.0, 0.0, -4.0);
        let sol = nmpc_solve(
            &VehicleState::at_rest(p),
            &hold(p, config.horizon),
            &hover_command(&allocator),
            None,
            &config,
            &wide_limits(),
            &allocator,
        )
        .unwrap();
        let v0 = sol.controls[0];
        let hover = params.hover_wrench().to_vector();
        assert!((v0.rows(0, 3) - hover.rows(0, 3)).amax() < 1e-3);
        assert!((v0.rows(3, 3) - hover.rows(3, 3)).amax() < 1e-4);
        let terminal = sol.states.last().unwrap();
        assert!((terminal.rows(0, 3) - p).amax() < 1e-4);
        assert_eq!(sol.diagnostics.status, SolveStatus::Converged);
    }

    #[test]
    fn excessive_lift_demand_pins_rotor_speeds() {
        let (_, limits, allocator) = setup();
        let config = NmpcConfig::default();
        let max = ActuatorCommand::new(
            [limits.rotor_speed_max, limits.rotor_speed_max, -limits.rotor_speed_max, -limits.rotor_speed_max],
            [0.0; 4],
        );
        // 4 T_max of lift gives about 105 m/s^2 net upward; ask for 200
        let reference: Vec<DesiredState> = (0..=config.horizon)
            .map(|i| {
                let t = i as f64 * config.dt;
                let mut d = DesiredState::hover(Vector3::new(0.0, 0.0, -100.0 * t * t));
                d.velocity = Vector3::new(0.0, 0.0, -200.0 * t);
                d.acceleration = Vector3::new(0.0, 0.0, -200.0);
                d
            })
            .collect();
        let sol =
            nmpc_solve(&VehicleState::at_rest(Vector3::zeros()), &reference, &max, None, &config, &limits, &allocator)
                .unwrap();
        for u in &sol.commands {
            for i in 0..4 {
                assert!(
                    (u[i].abs() - limits.rotor_speed_max).abs() <= config.constraint_tolerance,
                    "rotor {i} at {}",
                    u[i]
                );
            }
        }
    }

    #[test]
    fn repeated_solves_are_identical() {
        let (_, limits, allocator) = setup();
        let config = NmpcConfig::default();
        let reference: Vec<DesiredState> =
            (0..=config.horizon).map(|i| sluggish_lemniscate_reference(3.0 + i as f64 * config.dt)).collect();
        let x0 = VehicleState::at_rest(Vector3::new(0.05, -0.02, -3.9));
        let u = hover_command(&allocator);
        let first = nmpc_solve(&x0, &reference, &u, None, &config, &limits, &allocator).unwrap();
        let warm = first.shifted();
        let a = nmpc_solve(&x0, &reference, &u, Some(&warm), &config, &limits, &allocator).unwrap();
        let b = nmpc_solve(&x0, &reference, &u, Some(&warm), &config, &limits, &allocator).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_hover_commands_stay_in_stage_zero_window() {
        let (_, limits, allocator) = setup();
        let config = NmpcConfig::default();
        let p = Vector3::new(0.0, 0.0, -4.0);
        let reference = hold(p, config.horizon);
        let u_prev = hover_command(&allocator);
        let window = build_stage_bounds(&u_prev, &limits, config.dt, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut x = VehicleState::at_rest(p);
            x.position += Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            x.attitude = Vector3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            x.velocity = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            x.angular_velocity = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
            let (out, _) = controller_step(&x, &reference, &u_prev, None, &config, &limits, &allocator).unwrap();
            assert!(!out.held);
            assert!(out.stage0_residual <= 1e-6, "residual {}", out.stage0_residual);
            assert!(window.violation(0, &out.command.to_vector()) <= 1e-6);
        }
    }

    #[test]
    fn zero_iteration_cap_holds_previous_command() {
        let (_, limits, allocator) = setup();
        let config = NmpcConfig { max_sqp_iterations: 0, ..NmpcConfig::default() };
        let u_prev = ActuatorCommand::new([3000.0, 2900.0, -2950.0, -2910.0], [0.01, -0.02, 0.0, 0.03]);
        let x = VehicleState::at_rest(Vector3::new(1.0, 0.0, -4.0));
        let (out, warm) =
            controller_step(&x, &hold(Vector3::zeros(), config.horizon), &u_prev, None, &config, &limits, &allocator)
                .unwrap();
        assert!(out.held);
        assert_eq!(out.command, u_prev);
        assert_eq!(out.solution.diagnostics.status, SolveStatus::Failed);
        assert!(warm.is_none());
    }

    #[test]
    fn converged_solution_has_no_defects_and_merit_descends() {
        let (_, limits, allocator) = setup();
        let config = NmpcConfig::default();
        let x0 = VehicleState::at_rest(Vector3::new(0.3, -0.2, -3.7));
        let sol = nmpc_solve(
            &x0,
            &hold(Vector3::new(0.0, 0.0, -4.0), config.horizon),
            &hover_command(&allocator),
            None,
            &config,
            &limits,
            &allocator,
        )
        .unwrap();
        assert_eq!(sol.diagnostics.status, SolveStatus::Converged);
        assert!(sol.diagnostics.defect_residual <= 1e-6);
        assert!(sol.diagnostics.constraint_residual <= 1e-6);
        assert!(!sol.diagnostics.merit_history.is_empty());
        for step in &sol.diagnostics.merit_history {
            assert!(step.after <= step.before);
        }
    }

    #[test]
    fn merit_never_increases_along_a_tracking_run() {
        let (params, limits, _) = setup();
        let config = NmpcConfig::default();
        let mut ctrl = NmpcController::new(config.clone(), limits, &params).unwrap();
        let allocator = Allocator::new(&params).unwrap();
        let mut x = VehicleState::at_rest(sluggish_lemniscate_reference(0.0).position);
        let mut u = hover_command(&allocator);
        for k in 0..100 {
            let t = k as f64 * config.dt;
            let window: Vec<DesiredState> =
                (0..=config.horizon).map(|i| sluggish_lemniscate_reference(t + i as f64 * config.dt)).collect();
            let out = ctrl.step(&x, &window, &u).unwrap();
            for step in &out.solution.diagnostics.merit_history {
                assert!(step.after <= step.before);
            }
            u = out.command;
            x = crate::vehicle::step_rk4(
                &x,
                &crate::vehicle::propulsive_wrench(&u, &params),
                &Disturbance::zero(),
                &params,
                config.dt,
            )
            .unwrap();
        }
    }

    #[test]
    fn warm_start_needs_no_more_iterations() {
        let (params, limits, allocator) = setup();
        let config = NmpcConfig::default();
        let mut x = VehicleState::at_rest(sluggish_lemniscate_reference(0.0).position);
        let mut u = hover_command(&allocator);
        let mut warm: Option<HorizonSolution> = None;
        let (mut with, mut without) = (Vec::new(), Vec::new());
        for k in 0..500 {
            let t = k as f64 * config.dt;
            let window: Vec<DesiredState> =
                (0..=config.horizon).map(|i| sluggish_lemniscate_reference(t + i as f64 * config.dt)).collect();
            let cold = nmpc_solve(&x, &window, &u, None, &config, &limits, &allocator).unwrap();
            without.push(cold.diagnostics.sqp_iterations);
            let (out, next) = controller_step(&x, &window, &u, warm.as_ref(), &config, &limits, &allocator).unwrap();
            with.push(out.solution.diagnostics.sqp_iterations);
            warm = next;
            u = out.command;
            x = crate::vehicle::step_rk4(
                &x,
                &crate::vehicle::propulsive_wrench(&u, &params),
                &Disturbance::zero(),
                &params,
                config.dt,
            )
            .unwrap();
        }
        with.sort_unstable();
        without.sort_unstable();
        assert!(with[250] <= without[250], "median warm {} cold {}", with[250], without[250]);
    }

    #[test]
    fn zero_state_weight_minimizes_effort() {
        let (params, limits, _) = setup();
        let config =
            NmpcConfig { state_weights: [0.0; 12], effort_reference: EffortReference::Zero, ..NmpcConfig::default() };
        let mut ctrl = NmpcController::new(config.clone(), limits, &params).unwrap();
        let allocator = Allocator::new(&params).unwrap();
        let x = VehicleState::at_rest(Vector3::new(0.0, 0.0, -100.0));
        let mut u = hover_command(&allocator);
        let mut previous = f64::INFINITY;
        for _ in 0..30 {
            let out = ctrl.step(&x, &hold(x.position, config.horizon), &u).unwrap();
            let speed = out.command.rotor_speed.iter().map(|w| w.abs()).fold(0.0, f64::max);
            assert!(speed <= previous + 1e-9);
            previous = speed;
            u = out.command;
        }
        // 2929 rpm at 8000 rpm/s reaches zero within 0.37 s
        assert!(previous <= 1e-6, "rotor speed {previous}");
    }
}

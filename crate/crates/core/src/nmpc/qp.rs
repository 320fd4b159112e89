//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! ```text
//!     minimize    1/2 z' H z + g' z
//!     subject to  A_eq z = b_eq
//!                 lower <= C z <= upper
//! ```
//!
//! `H` must be positive definite. Infinite entries of `lower`/`upper` drop the
//! corresponding side. The method starts from the unconstrained minimizer and
//! adds violated constraints one at a time, so it needs no feasible start and
//! reports infeasibility directly. The factorization `J = L^-T Q` and the upper
//! triangular `R` are updated with Givens rotations on every add/drop.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
        }
    }

    /// Adds simple bounds `lower <= z <= upper` as identity rows.
    pub fn with_bounds(mut self, lower: &DVector<f64>, upper: &DVector<f64>) -> Self {
        let n = self.dim();
        let rows = self.ineq_matrix.nrows();
        let mut c = DMatrix::zeros(rows + n, n);
        c.rows_mut(0, rows).copy_from(&self.ineq_matrix);
        c.view_mut((rows, 0), (n, n)).fill_with_identity();
        let mut lo = DVector::zeros(rows + n);
        let mut hi = DVector::zeros(rows + n);
        lo.rows_mut(0, rows).copy_from(&self.ineq_lower);
        hi.rows_mut(0, rows).copy_from(&self.ineq_upper);
        lo.rows_mut(rows, n).copy_from(lower);
        hi.rows_mut(rows, n).copy_from(upper);
        self.ineq_matrix = c;
        self.ineq_lower = lo;
        self.ineq_upper = hi;
        self
    }

    pub fn with_inequalities(mut self, c: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.ineq_matrix = c;
        self.ineq_lower = lower;
        self.ineq_upper = upper;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.gradient.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    /// Hessian failed the Cholesky factorization.
    NotConvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of the equality rows (`H z + g = A_eq' y + C' mu`).
    pub eq_multipliers: DVector<f64>,
    /// Signed inequality multipliers: positive when the lower side is active,
    /// negative when the upper side is.
    pub ineq_multipliers: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Number of active constraints at termination (equalities included).
    pub active_set_size: usize,
}

/// One constraint in the solver's internal `n' z >= b` form.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    row: usize,
    equality: bool,
    /// +1 for `C z >= lower` (or an equality), -1 for `-C z >= -upper`.
    sign: f64,
}

struct Solver<'a> {
    problem: &'a QpProblem,
    constraints: Vec<Constraint>,
    n: usize,
}

impl<'a> Solver<'a> {
    fn normal(&self, k: usize) -> DVector<f64> {
        let c = self.constraints[k];
        let row = if c.equality {
            self.problem.eq_matrix.row(c.row).transpose()
        } else {
            self.problem.ineq_matrix.row(c.row).transpose()
        };
        row * c.sign
    }

    fn rhs(&self, k: usize) -> f64 {
        let c = self.constraints[k];
        if c.equality {
            self.problem.eq_rhs[c.row] * c.sign
        } else if c.sign > 0.0 {
            self.problem.ineq_lower[c.row]
        } else {
            -self.problem.ineq_upper[c.row]
        }
    }

    fn slack(&self, k: usize, z: &DVector<f64>) -> f64 {
        let c = self.constraints[k];
        let dot = if c.equality {
            self.problem.eq_matrix.row(c.row).transpose().dot(z)
        } else {
            self.problem.ineq_matrix.row(c.row).transpose().dot(z)
        };
        c.sign * dot - self.rhs(k)
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a + s * b;
        m[(r, j)] = -s * a + c * b;
    }
}

/// Solves the QP. Deterministic: ties in the most-violated selection go to the
/// lowest constraint index.
pub fn solve_qp(problem: &QpProblem) -> QpSolution {
    let n = problem.dim();
    let m_eq = problem.eq_rhs.len();
    let m_in = problem.ineq_lower.len();
    let failed = |status| QpSolution {
        z: DVector::zeros(n),
        eq_multipliers: DVector::zeros(m_eq),
        ineq_multipliers: DVector::zeros(m_in),
        status,
        iterations: 0,
        active_set_size: 0,
    };

    let chol = match problem.hessian.clone().cholesky() {
        Some(c) => c,
        None => return failed(QpStatus::NotConvex),
    };
    let mut z = -chol.solve(&problem.gradient);
    // J = L^-T
    let l_inv = match chol.l().solve_lower_triangular(&DMatrix::identity(n, n)) {
        Some(m) => m,
        None => return failed(QpStatus::NotConvex),
    };
    let mut j_mat = l_inv.transpose();
    let mut r_mat = DMatrix::<f64>::zeros(n, n);

    let mut constraints = Vec::with_capacity(2 * m_eq + 2 * m_in);
    for row in 0..m_eq {
        constraints.push(Constraint { row, equality: true, sign: 1.0 });
        constraints.push(Constraint { row, equality: true, sign: -1.0 });
    }
    for row in 0..m_in {
        if problem.ineq_lower[row] > f64::NEG_INFINITY {
            constraints.push(Constraint { row, equality: false, sign: 1.0 });
        }
        if problem.ineq_upper[row] < f64::INFINITY {
            constraints.push(Constraint { row, equality: false, sign: -1.0 });
        }
    }
    let solver = Solver { problem, constraints, n };
    let norms: Vec<f64> =
        (0..solver.constraints.len()).map(|k| solver.normal(k).norm().max(f64::MIN_POSITIVE)).collect();

    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut multipliers: Vec<f64> = Vec::with_capacity(n);
    let mut is_active = vec![false; solver.constraints.len()];
    let max_iterations = 10 * (n + solver.constraints.len()) + 100;
    let mut iterations = 0;
    let mut status = QpStatus::Optimal;

    'outer: loop {
        // Most violated constraint, normalized by the row norm.
        let mut add = None;
        let mut worst = 0.0;
        for k in 0..solver.constraints.len() {
            if is_active[k] {
                continue;
            }
            let s = solver.slack(k, &z);
            let tol = 1e-12 * (1.0 + solver.rhs(k).abs());
            if s < -tol {
                let v = -s / norms[k];
                if v > worst {
                    worst = v;
                    add = Some(k);
                }
            }
        }
        let Some(p) = add else { break };
        let np = solver.normal(p);
        let mut slack_p = solver.slack(p, &z);
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iterations {
                status = QpStatus::IterationLimit;
                break 'outer;
            }
            let q = active.len();
            let d = j_mat.transpose() * &np;
            let mut step_dir = DVector::zeros(solver.n);
            for col in q..n {
                step_dir.axpy(d[col], &j_mat.column(col), 1.0);
            }
            // r = R^-1 d_1
            let mut r = DVector::from_fn(q, |i, _| d[i]);
            for i in (0..q).rev() {
                let mut acc = r[i];
                for k in i + 1..q {
                    acc -= r_mat[(i, k)] * r[k];
                }
                r[i] = acc / r_mat[(i, i)];
            }

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (idx, &k) in active.iter().enumerate() {
                if !solver.constraints[k].equality && r[idx] > 0.0 {
                    let t = multipliers[idx] / r[idx];
                    if t < t1 {
                        t1 = t;
                        drop = Some(idx);
                    }
                }
            }
            let d2_sq: f64 = d.rows(q, n - q).norm_squared();
            let t2 = if d2_sq <= 1e-24 * d.norm_squared() || d2_sq == 0.0 {
                f64::INFINITY
            } else {
                -slack_p / step_dir.dot(&np)
            };
            if t1.is_infinite() && t2.is_infinite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }

            let full = t2 <= t1;
            let t = if full { t2 } else { t1 };
            if t2.is_finite() {
                z.axpy(t, &step_dir, 1.0);
            }
            for (idx, u) in multipliers.iter_mut().enumerate() {
                *u -= t * r[idx];
            }
            u_plus += t;

            if full {
                // Add p: rotate d so that entries beyond q vanish.
                let mut d = d;
                for i in (q + 1..n).rev() {
                    if d[i] == 0.0 {
                        continue;
                    }
                    let (c, s, h) = givens(d[i - 1], d[i]);
                    d[i - 1] = h;
                    d[i] = 0.0;
                    rotate_columns(&mut j_mat, i - 1, i, c, s);
                }
                for i in 0..=q {
                    r_mat[(i, q)] = d[i];
                }
                active.push(p);
                multipliers.push(u_plus);
                is_active[p] = true;
                break;
            }

            // Partial step: drop the blocking constraint and retry p.
            let idx = drop.expect("finite t1 has a blocking constraint");
            let k = active.remove(idx);
            multipliers.remove(idx);
            is_active[k] = false;
            let q_old = q;
            // Delete column idx of R and restore triangularity.
            for col in idx..q_old - 1 {
                for row in 0..n {
                    r_mat[(row, col)] = r_mat[(row, col + 1)];
                }
            }
            for row in 0..n {
                r_mat[(row, q_old - 1)] = 0.0;
            }
            for i in idx..q_old - 1 {
                let (c, s, h) = givens(r_mat[(i, i)], r_mat[(i + 1, i)]);
                r_mat[(i, i)] = h;
                r_mat[(i + 1, i)] = 0.0;
                for col in i + 1..q_old - 1 {
                    let (a, b) = (r_mat[(i, col)], r_mat[(i + 1, col)]);
                    r_mat[(i, col)] = c * a + s * b;
                    r_mat[(i + 1, col)] = -s * a + c * b;
                }
                rotate_columns(&mut j_mat, i, i + 1, c, s);
            }
            slack_p = solver.slack(p, &z);
            if slack_p >= 0.0 && t2.is_finite() {
                // Dropping already satisfied p (can happen on degenerate steps).
                continue 'outer;
            }
        }
    }

    let mut eq_multipliers = DVector::zeros(m_eq);
    let mut ineq_multipliers = DVector::zeros(m_in);
    for (&k, &u) in active.iter().zip(&multipliers) {
        let c = solver.constraints[k];
        if c.equality {
            eq_multipliers[c.row] += c.sign * u;
        } else {
            ineq_multipliers[c.row] += c.sign * u;
        }
    }
    QpSolution { z, eq_multipliers, ineq_multipliers, status, iterations, active_set_size: active.len() }
}

/// Largest violation among stationarity, primal feasibility, dual feasibility and
/// complementarity.
pub fn kkt_residual(problem: &QpProblem, sol: &QpSolution) -> f64 {
    let z = &sol.z;
    let mut stationarity = &problem.hessian * z + &problem.gradient;
    if !problem.eq_rhs.is_empty() {
        stationarity -= problem.eq_matrix.transpose() * &sol.eq_multipliers;
    }
    if !problem.ineq_lower.is_empty() {
        stationarity -= problem.ineq_matrix.transpose() * &sol.ineq_multipliers;
    }
    let mut worst = stationarity.amax();

    if !problem.eq_rhs.is_empty() {
        worst = worst.max((&problem.eq_matrix * z - &problem.eq_rhs).amax());
    }
    if !problem.ineq_lower.is_empty() {
        let cz = &problem.ineq_matrix * z;
        for i in 0..cz.len() {
            let (lo, hi, mu) = (problem.ineq_lower[i], problem.ineq_upper[i], sol.ineq_multipliers[i]);
            worst = worst.max(lo - cz[i]).max(cz[i] - hi);
            if mu > 0.0 {
                worst = worst.max(if lo.is_finite() { mu * (cz[i] - lo).abs() } else { mu });
            } else if mu < 0.0 {
                worst = worst.max(if hi.is_finite() { -mu * (hi - cz[i]).abs() } else { -mu });
            }
        }
    }
    worst
}

//! Finite-horizon optimal control for a linear plant with quadratic cost and
//! an input box.
//!
//! States are eliminated through the dynamics (dense single shooting), leaving
//! a strongly convex QP over the stacked inputs whose only constraints are
//! simple bounds. That QP is solved by accelerated projected gradient with
//! function-value restart, interleaved with Newton steps on the variables not
//! held at a bound.

use nalgebra::Cholesky;

use crate::error::{check_dim, Error, Result};
use crate::objective::{horizon_cost, QuadraticStageCost, StageCost};
use crate::plant::{ControlSequence, InputBox, LinearPlant, StateMap};
use crate::{Matrix, Vector};

const POWER_ITERATIONS: usize = 50;
const POWER_TOL: f64 = 1e-12;
/// Gradient iterations between subspace Newton attempts.
const POLISH_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Bound on `‖u − clamp(u − ∇f(u))‖_∞` at termination.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 50_000,
        }
    }
}

/// `min ½ uᵀHu + gᵀu + c` subject to `lower ≤ u ≤ upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedProblem {
    pub hessian: Matrix,
    pub linear: Vector,
    pub constant: f64,
    pub lower: Vector,
    pub upper: Vector,
}

impl CondensedProblem {
    pub fn new(hessian: Matrix, linear: Vector, constant: f64, lower: Vector, upper: Vector) -> Result<Self> {
        let d = linear.len();
        check_dim("QP Hessian rows", d, hessian.nrows())?;
        check_dim("QP Hessian columns", d, hessian.ncols())?;
        check_dim("QP lower bound", d, lower.len())?;
        check_dim("QP upper bound", d, upper.len())?;
        Ok(Self {
            hessian,
            linear,
            constant,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, u: &Vector) -> f64 {
        0.5 * u.dot(&(&self.hessian * u)) + self.linear.dot(u) + self.constant
    }

    pub fn gradient(&self, u: &Vector) -> Vector {
        &self.hessian * u + &self.linear
    }

    pub fn project(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&lo, &hi))| v.max(lo).min(hi)),
        )
    }

    /// `‖u − clamp(u − ∇f(u))‖_∞`, zero exactly at the box-constrained minimizer.
    pub fn projected_gradient_norm(&self, u: &Vector) -> f64 {
        let step = u - self.gradient(u);
        (u - self.project(&step)).amax()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
}

/// Raw output of [`solve_box_qp`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution {
    pub u: Vector,
    /// `½ uᵀHu + gᵀu + c` at `u`.
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Optimized input sequence of a finite-horizon problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub useq: ControlSequence,
    /// `J_N(x0, useq)` evaluated by rollout.
    pub value: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(m: &Matrix, max_iter: usize, tol: f64) -> f64 {
    let d = m.nrows();
    if d == 0 {
        return 0.0;
    }
    // Deterministic start with distinct entries to avoid symmetric nulls.
    let mut v = Vector::from_fn(d, |i, _| 1.0 + 0.1 * i as f64);
    v.normalize_mut();
    let mut lambda = v.dot(&(m * &v));
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = v.dot(&(m * &v));
        let done = (next - lambda).abs() <= tol * next.abs().max(1.0);
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

/// Solves a strongly convex box QP by accelerated projected gradient.
///
/// The step is `1/L` with `L` from power iteration. Momentum is reset whenever
/// the objective would increase; if a plain projected step still increases it,
/// `L` was underestimated and is doubled. Every few iterations a Newton step
/// restricted to the currently free variables is tried and kept when it lowers
/// the objective. Without `initial` the iterate starts at the clamped
/// unconstrained minimizer.
pub fn solve_box_qp(
    prob: &CondensedProblem,
    settings: &SolverSettings,
    initial: Option<&Vector>,
) -> Result<BoxQpSolution> {
    let d = prob.dim();
    if d == 0 {
        return Err(Error::contract("QP has no decision variables"));
    }
    let chol = Cholesky::new(prob.hessian.clone())
        .ok_or_else(|| Error::Solver("QP Hessian is not positive definite".into()))?;

    let mut u = match initial {
        Some(u0) => {
            check_dim("initial iterate", d, u0.len())?;
            prob.project(u0)
        }
        None => prob.project(&chol.solve(&(-&prob.linear))),
    };

    let mut lipschitz = power_iteration(&prob.hessian, POWER_ITERATIONS, POWER_TOL);
    if !(lipschitz > 0.0) {
        return Err(Error::Solver("could not estimate the Hessian spectrum".into()));
    }

    let mut f_u = prob.objective(&u);
    let mut y = u.clone();
    let mut momentum = false;
    let mut t = 1.0_f64;
    let mut iterations = 0;
    let mut residual = prob.projected_gradient_norm(&u);

    while residual > settings.tol && iterations < settings.max_iter {
        if iterations % POLISH_EVERY == 0 {
            if let Some((p, f_p, r_p)) = subspace_newton(prob, &u, f_u, residual) {
                u = p;
                f_u = f_p;
                residual = r_p;
                y = u.clone();
                t = 1.0;
                momentum = false;
                if residual <= settings.tol {
                    break;
                }
            }
        }
        iterations += 1;
        let grad = prob.gradient(&y);
        let candidate = prob.project(&(&y - grad / lipschitz));
        let f_candidate = prob.objective(&candidate);

        if f_candidate > f_u + 1e-15 * f_u.abs().max(1.0) {
            if momentum {
                y = u.clone();
                t = 1.0;
                momentum = false;
            } else {
                lipschitz *= 2.0;
            }
            continue;
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &candidate + (&candidate - &u) * ((t - 1.0) / t_next);
        momentum = true;
        t = t_next;
        u = candidate;
        f_u = f_candidate;
        residual = prob.projected_gradient_norm(&u);
    }

    let status = if residual <= settings.tol {
        SolveStatus::Converged
    } else {
        SolveStatus::IterationLimit
    };
    Ok(BoxQpSolution {
        objective: prob.objective(&u),
        u,
        status,
        kkt_residual: residual,
        iterations,
    })
}

/// Newton step on the variables not held at a bound by the gradient, then
/// projected. Returns the new point, objective and residual if it improves.
fn subspace_newton(prob: &CondensedProblem, u: &Vector, f_u: f64, residual: f64) -> Option<(Vector, f64, f64)> {
    let grad = prob.gradient(u);
    let free: Vec<usize> = (0..prob.dim())
        .filter(|&i| {
            let held_low = u[i] <= prob.lower[i] && grad[i] >= 0.0;
            let held_high = u[i] >= prob.upper[i] && grad[i] <= 0.0;
            !(held_low || held_high)
        })
        .collect();
    if free.is_empty() {
        return None;
    }
    let h_ff = prob.hessian.select_rows(&free).select_columns(&free);
    let g_f = grad.select_rows(&free);
    let step = Cholesky::new(h_ff)?.solve(&(-g_f));
    let mut candidate = u.clone();
    for (k, &i) in free.iter().enumerate() {
        candidate[i] += step[k];
    }
    let candidate = prob.project(&candidate);
    let f_c = prob.objective(&candidate);
    let r_c = prob.projected_gradient_norm(&candidate);
    (f_c < f_u || (f_c <= f_u && r_c < residual)).then_some((candidate, f_c, r_c))
}

/// Plant, cost, input box and solver settings of one finite-horizon problem family.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub plant: LinearPlant,
    pub cost: QuadraticStageCost,
    pub input_box: InputBox,
    pub settings: SolverSettings,
}

impl MpcProblem {
    pub fn new(
        plant: LinearPlant,
        cost: QuadraticStageCost,
        input_box: InputBox,
        settings: SolverSettings,
    ) -> Result<Self> {
        check_dim("cost Q vs plant state", plant.state_dim(), cost.state_dim())?;
        check_dim("cost R vs plant input", plant.input_dim(), cost.input_dim())?;
        check_dim("input box vs plant input", plant.input_dim(), input_box.dim())?;
        if !(settings.tol > 0.0) || settings.max_iter == 0 {
            return Err(Error::config(
                "solver",
                "tol must be positive and max_iter at least 1",
            ));
        }
        Ok(Self {
            plant,
            cost,
            input_box,
            settings,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.plant.input_dim()
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        self.cost.stage(x, u)
    }

    /// Dense condensed QP of the horizon-`horizon` problem from `x0`.
    ///
    /// With `x(k) = Aᵏx0 + Σ_{j<k} A^{k−1−j} B u(j) = φ_k + Γ_k u`,
    /// `H = 2 Σ Γ_kᵀQΓ_k + 2 blkdiag(R)`, `g = 2 Σ Γ_kᵀQ(φ_k − x*)` and
    /// `c = Σ (φ_k − x*)ᵀQ(φ_k − x*)`.
    pub fn condense(&self, horizon: usize, x0: &Vector) -> Result<CondensedProblem> {
        let n = self.state_dim();
        let m = self.input_dim();
        let dim = horizon * m;
        if dim == 0 {
            return Err(Error::contract("condensed problem needs N·m > 0"));
        }
        check_dim("initial state", n, x0.len())?;

        let a = self.plant.a();
        let b = self.plant.b();
        let q = self.cost.q();
        let r = self.cost.r();

        let mut hessian = Matrix::zeros(dim, dim);
        let mut linear = Vector::zeros(dim);
        let mut constant = 0.0;

        let mut free = x0.clone();
        let mut gamma = Matrix::zeros(n, dim);
        for k in 0..horizon {
            let offset = &free - self.cost.target();
            let q_gamma = q * &gamma;
            hessian += gamma.transpose() * &q_gamma * 2.0;
            linear += q_gamma.transpose() * &offset * 2.0;
            constant += offset.dot(&(q * &offset));
            let mut block = hessian.view_mut((k * m, k * m), (m, m));
            block += r * 2.0;

            // Γ_{k+1} = A Γ_k + [0 … B … 0] with B in block k.
            gamma = a * &gamma;
            let mut block = gamma.view_mut((0, k * m), (n, m));
            block += b;
            free = a * &free;
        }
        // Remove rounding asymmetry.
        let sym = (&hessian + hessian.transpose()) * 0.5;

        let lower = Vector::from_iterator(dim, (0..dim).map(|i| self.input_box.lower()[i % m]));
        let upper = Vector::from_iterator(dim, (0..dim).map(|i| self.input_box.upper()[i % m]));
        CondensedProblem::new(sym, linear, constant, lower, upper)
    }

    /// Solves the horizon-`horizon` problem from `x0`.
    pub fn solve(&self, horizon: usize, x0: &Vector) -> Result<OcpSolution> {
        let qp = self.condense(horizon, x0)?;
        let sol = solve_box_qp(&qp, &self.settings, None)?;
        self.finish(x0, sol)
    }

    pub(crate) fn finish(&self, x0: &Vector, sol: BoxQpSolution) -> Result<OcpSolution> {
        let useq = ControlSequence::from_stacked(self.input_dim(), &sol.u)?;
        useq.check_box(&self.input_box)?;
        let value = horizon_cost(&self.cost, &self.plant, x0, &useq)?;
        Ok(OcpSolution {
            useq,
            value,
            status: sol.status,
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
        })
    }

    /// `V_N(x)`, with `V_0 ≡ 0`.
    pub fn value_function(&self, horizon: usize, x: &Vector) -> Result<f64> {
        if horizon == 0 {
            check_dim("state", self.state_dim(), x.len())?;
            return Ok(0.0);
        }
        Ok(self.solve(horizon, x)?.value)
    }

    /// Receding-horizon law `μ_N(x)`: first sample of the optimal sequence.
    pub fn rh_control(&self, horizon: usize, x: &Vector) -> Result<Vector> {
        if horizon == 0 {
            return Err(Error::contract("receding-horizon law needs N ≥ 1"));
        }
        let sol = self.solve(horizon, x)?;
        Ok(sol.useq.samples()[0].clone())
    }
}

//! Stage and horizon costs, the blocked-prefix cost and trajectory metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlSequence, InputBox, LinearPlant, StateMap, Trajectory};
use crate::{Matrix, Vector};

const SYMMETRY_TOL: f64 = 1e-12;
const Q_EIGEN_FLOOR: f64 = -1e-10;
/// Smallest admissible eigenvalue of the input weight.
pub const R_EIGEN_FLOOR: f64 = 1e-12;

/// A nonnegative running cost `ℓ(x, u)`.
pub trait StageCost {
    fn stage(&self, x: &Vector, u: &Vector) -> f64;
}

/// Closure adapter for [`StageCost`].
pub struct FnStageCost<F>(pub F);

impl<F> StageCost for FnStageCost<F>
where
    F: Fn(&Vector, &Vector) -> f64,
{
    fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        (self.0)(x, u)
    }
}

/// `ℓ(x, u) = (x − x*)ᵀ Q (x − x*) + uᵀ R u`.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStageCost {
    Q: Matrix,
    R: Matrix,
    target: Vector,
}

#[allow(non_snake_case)]
impl QuadraticStageCost {
    /// Regulation to the origin.
    pub fn new(Q: Matrix, R: Matrix) -> Result<Self> {
        let n = Q.nrows();
        Self::with_target(Q, R, Vector::zeros(n))
    }

    pub fn with_target(Q: Matrix, R: Matrix, target: Vector) -> Result<Self> {
        if !Q.is_square() || Q.nrows() == 0 {
            return Err(Error::config("cost.Q", "Q must be a nonempty square matrix"));
        }
        if !R.is_square() || R.nrows() == 0 {
            return Err(Error::config("cost.R", "R must be a nonempty square matrix"));
        }
        check_dim("cost target", Q.nrows(), target.len())?;
        if !is_symmetric(&Q) {
            return Err(Error::config("cost.Q", "Q must be symmetric"));
        }
        if !is_symmetric(&R) {
            return Err(Error::config("cost.R", "R must be symmetric"));
        }
        let q_min = min_eigenvalue(&Q);
        if q_min < Q_EIGEN_FLOOR {
            return Err(Error::config(
                "cost.Q",
                format!("Q must be positive semidefinite (smallest eigenvalue {q_min:e})"),
            ));
        }
        let r_min = min_eigenvalue(&R);
        if r_min <= R_EIGEN_FLOOR {
            return Err(Error::config(
                "cost.R",
                format!("R must be positive definite (smallest eigenvalue {r_min:e})"),
            ));
        }
        Ok(Self { Q, R, target })
    }

    pub fn q(&self) -> &Matrix {
        &self.Q
    }

    pub fn r(&self) -> &Matrix {
        &self.R
    }

    pub fn target(&self) -> &Vector {
        &self.target
    }

    pub fn state_dim(&self) -> usize {
        self.Q.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.R.nrows()
    }

    /// Dimension-checked stage cost.
    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> Result<f64> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(self.stage(x, u))
    }
}

impl StageCost for QuadraticStageCost {
    fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        let e = x - &self.target;
        let val = e.dot(&(&self.Q * &e)) + u.dot(&(&self.R * u));
        // PSD weights can still produce -0 or a tiny negative from rounding.
        val.max(0.0)
    }
}

fn is_symmetric(m: &Matrix) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= SYMMETRY_TOL * scale
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// `J_N(x0, u) = Σ_{k<N} ℓ(x_u(k), u(k))`, no terminal term.
pub fn horizon_cost<C, M>(cost: &C, map: &M, x0: &Vector, useq: &ControlSequence) -> Result<f64>
where
    C: StageCost + ?Sized,
    M: StateMap + ?Sized,
{
    if useq.is_empty() {
        return Err(Error::contract("horizon cost needs at least one input"));
    }
    blocked_prefix_cost(cost, map, x0, useq)
}

/// δ(x): cost accrued along the blocked samples from `x`; zero for an empty prefix.
pub fn blocked_prefix_cost<C, M>(
    cost: &C,
    map: &M,
    x: &Vector,
    blocked: &ControlSequence,
) -> Result<f64>
where
    C: StageCost + ?Sized,
    M: StateMap + ?Sized,
{
    check_dim("initial state", map.state_dim(), x.len())?;
    let mut state = x.clone();
    let mut total = 0.0;
    for u in blocked.samples() {
        total += cost.stage(&state, u);
        state = map.step(&state, u)?;
    }
    Ok(total)
}

/// Outcome of [`truncated_infinite_cost`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedCost {
    pub value: f64,
    /// The tail tolerance was reached before `t_max`.
    pub converged: bool,
    pub steps: usize,
}

/// Accumulates closed-loop stage costs under `policy` until a stage cost drops
/// below `tail_tol` or `t_max` steps have run.
pub fn truncated_infinite_cost<C, M, P>(
    cost: &C,
    map: &M,
    bounds: &InputBox,
    x0: &Vector,
    mut policy: P,
    t_max: usize,
    tail_tol: f64,
) -> Result<TruncatedCost>
where
    C: StageCost + ?Sized,
    M: StateMap + ?Sized,
    P: FnMut(&Vector) -> Result<Vector>,
{
    if t_max == 0 {
        return Err(Error::contract("t_max must be at least 1"));
    }
    let mut x = x0.clone();
    let mut value = 0.0;
    for t in 0..t_max {
        let u = policy(&x)?;
        if !bounds.contains(&u) {
            return Err(Error::contract(format!(
                "policy returned {:?} outside the input box at step {t}",
                u.as_slice()
            )));
        }
        let s = cost.stage(&x, &u);
        value += s;
        if s < tail_tol {
            return Ok(TruncatedCost {
                value,
                converged: true,
                steps: t + 1,
            });
        }
        x = map.step(&x, &u)?;
    }
    Ok(TruncatedCost {
        value,
        converged: false,
        steps: t_max,
    })
}

/// Candidate definitions of a closed-loop "RMSE" figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RmsStateNorm,
    RmsWeightedCost,
    SqrtTotalCost,
    RmsOutput,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::RmsStateNorm,
        MetricKind::RmsWeightedCost,
        MetricKind::SqrtTotalCost,
        MetricKind::RmsOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::RmsStateNorm => "rms_state_norm",
            MetricKind::RmsWeightedCost => "rms_weighted_cost",
            MetricKind::SqrtTotalCost => "sqrt_total_cost",
            MetricKind::RmsOutput => "rms_output",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "sim.metric",
                    format!(
                        "unknown metric `{s}` (expected one of rms_state_norm, rms_weighted_cost, sqrt_total_cost, rms_output)"
                    ),
                )
            })
    }
}

/// Evaluates `kind` over the applied steps of `traj` (means over the T inputs).
pub fn trajectory_metric(
    kind: MetricKind,
    cost: &QuadraticStageCost,
    plant: &LinearPlant,
    traj: &Trajectory,
) -> Result<f64> {
    let steps = traj.steps();
    if steps == 0 {
        return Err(Error::contract("metric needs a trajectory with at least one step"));
    }
    let t = steps as f64;
    let value = match kind {
        MetricKind::RmsStateNorm => {
            let sum: f64 = traj
                .stages()
                .map(|(x, _)| (x - cost.target()).norm_squared())
                .sum();
            (sum / t).sqrt()
        }
        MetricKind::RmsWeightedCost => {
            let sum: f64 = traj.stages().map(|(x, u)| cost.stage(x, u)).sum();
            (sum / t).sqrt()
        }
        MetricKind::SqrtTotalCost => traj.stages().map(|(x, u)| cost.stage(x, u)).sum::<f64>().sqrt(),
        MetricKind::RmsOutput => {
            let sum: f64 = traj
                .stages()
                .map(|(x, _)| (plant.c() * x).norm_squared())
                .sum();
            (sum / t).sqrt()
        }
    };
    Ok(value)
}

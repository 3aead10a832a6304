//! Dynamic move blocking.
//!
//! While a new optimization runs, the plant keeps receiving samples from the
//! previous optimal sequence `ũ`. The next problem therefore has its first
//! `N_B` inputs blocked to `ũ(N−N_B..N)`, which reduces it to a standard
//! problem of horizon `N−N_B` started from the model-predicted handover state.
//! Each cycle releases `P = N−N_B` samples to the plant.

use serde::{Deserialize, Serialize};

use crate::bounds::check_first_bound;
use crate::error::{check_dim, Error, Result};
use crate::objective::blocked_prefix_cost;
use crate::ocp::{solve_box_qp, CondensedProblem, MpcProblem, OcpSolution};
use crate::plant::{propagate, ControlSequence, StateMap};
use crate::{Matrix, Vector};

/// Horizon bookkeeping of the blocked scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DmbConfig {
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// Blocked samples `N_B`.
    pub blocking: usize,
    /// Steps one optimization occupies, `N_OP`.
    pub op_steps: usize,
}

impl DmbConfig {
    /// Enforces `1 ≤ N_OP ≤ N_B ≤ N − 2`.
    pub fn new(horizon: usize, blocking: usize, op_steps: usize) -> Result<Self> {
        if op_steps < 1 {
            return Err(Error::Admissibility("N_OP ≥ 1 violated".into()));
        }
        if op_steps > blocking {
            return Err(Error::Admissibility(format!(
                "N_OP ≤ N_B violated ({op_steps} > {blocking}): the solve would not finish before its result is needed"
            )));
        }
        if blocking + 2 > horizon {
            return Err(Error::Admissibility(format!(
                "N_B ≤ N−2 violated ({blocking} > {})",
                horizon as i64 - 2
            )));
        }
        debug_assert!(check_first_bound(horizon, blocking, op_steps));
        Ok(Self {
            horizon,
            blocking,
            op_steps,
        })
    }

    /// Samples released to the plant per cycle, `N − N_B`.
    pub fn period(&self) -> usize {
        self.horizon - self.blocking
    }

    /// Horizon of the equivalent reduced problem, `N − N_B`.
    pub fn reduced_horizon(&self) -> usize {
        self.horizon - self.blocking
    }
}

/// How the first carried-over sequence is produced before `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapKind {
    /// One unblocked full-horizon solve completed before deployment.
    #[default]
    FullSolve,
    /// Idle (all-zero) inputs until the first optimization lands.
    Zeros,
}

/// Controller state carried between cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct DmbState {
    /// The current length-`N` sequence `ũ`.
    pub sequence: ControlSequence,
    /// Absolute time of `sequence[0]`.
    pub cycle_start: usize,
    /// Completed optimizations.
    pub cycle_index: usize,
}

/// What one cycle releases and computes.
#[derive(Debug, Clone, PartialEq)]
pub struct DmbPlan {
    /// Samples applied at `cycle_start .. cycle_start + P`.
    pub applied: ControlSequence,
    /// Predicted state at `cycle_start + N`, where the newly optimized samples begin.
    pub handover_state: Vector,
    /// Reduced-horizon solve started from `handover_state`.
    pub solution: OcpSolution,
}

/// State reached after the blocked samples; `x` itself when none are blocked.
pub fn predict_handover<M: StateMap + ?Sized>(
    map: &M,
    x: &Vector,
    blocked: &ControlSequence,
) -> Result<Vector> {
    propagate(map, x, blocked)
}

/// Solves the horizon-`horizon` problem with its first `prefix.len()` inputs
/// fixed to `prefix`, by condensing the full problem and eliminating the fixed
/// variables.
///
/// Returns the full sequence (prefix followed by the optimized tail) and the
/// full `J_N` including the prefix cost.
pub fn solve_with_fixed_prefix(
    problem: &MpcProblem,
    horizon: usize,
    x: &Vector,
    prefix: &ControlSequence,
) -> Result<OcpSolution> {
    let m = problem.input_dim();
    check_dim("prefix input", m, prefix.input_dim())?;
    if prefix.len() >= horizon {
        return Err(Error::contract(format!(
            "fixed prefix of length {} leaves no free inputs in horizon {horizon}",
            prefix.len()
        )));
    }
    prefix.check_box(&problem.input_box)?;

    let full = problem.condense(horizon, x)?;
    let fixed_dim = prefix.len() * m;
    let free_dim = full.dim() - fixed_dim;
    let p = prefix.to_stacked();

    // With u = [p; v]: ½vᵀH_vv v + (g_v + H_vp p)ᵀv + ½pᵀH_pp p + g_pᵀp + c.
    let h_vv: Matrix = full.hessian.view((fixed_dim, fixed_dim), (free_dim, free_dim)).into();
    let h_vp: Matrix = full.hessian.view((fixed_dim, 0), (free_dim, fixed_dim)).into();
    let h_pp: Matrix = full.hessian.view((0, 0), (fixed_dim, fixed_dim)).into();
    let g_v: Vector = full.linear.rows(fixed_dim, free_dim).into();
    let g_p: Vector = full.linear.rows(0, fixed_dim).into();

    let tail_problem = CondensedProblem::new(
        h_vv,
        g_v + h_vp * &p,
        0.5 * p.dot(&(h_pp * &p)) + g_p.dot(&p) + full.constant,
        full.lower.rows(fixed_dim, free_dim).into(),
        full.upper.rows(fixed_dim, free_dim).into(),
    )?;
    let tail = solve_box_qp(&tail_problem, &problem.settings, None)?;

    let mut stacked = p.as_slice().to_vec();
    stacked.extend_from_slice(tail.u.as_slice());
    let joined = crate::ocp::BoxQpSolution {
        u: Vector::from_vec(stacked),
        ..tail
    };
    problem.finish(x, joined)
}

/// Blocked full-horizon problem at `x`: inputs `0..N_B` fixed to `ũ(N−N_B..N)`.
pub fn solve_blocked_full(
    problem: &MpcProblem,
    cfg: &DmbConfig,
    x: &Vector,
    utilde: &ControlSequence,
) -> Result<OcpSolution> {
    check_sequence_len(utilde, cfg.horizon)?;
    solve_with_fixed_prefix(problem, cfg.horizon, x, &utilde.tail(cfg.blocking))
}

/// Standard problem of horizon `N − N_B` from the handover state.
pub fn solve_reduced(problem: &MpcProblem, cfg: &DmbConfig, handover: &Vector) -> Result<OcpSolution> {
    problem.solve(cfg.reduced_horizon(), handover)
}

/// Installs the sequence used before the first blocked optimization completes.
pub fn bootstrap(
    problem: &MpcProblem,
    cfg: &DmbConfig,
    x0: &Vector,
    kind: BootstrapKind,
) -> Result<DmbState> {
    check_dim("initial state", problem.state_dim(), x0.len())?;
    let sequence = match kind {
        BootstrapKind::FullSolve => problem.solve(cfg.horizon, x0)?.useq,
        BootstrapKind::Zeros => {
            let zeros = ControlSequence::zeros(problem.input_dim(), cfg.horizon);
            zeros.check_box(&problem.input_box).map_err(|_| {
                Error::contract("zero bootstrap requires u = 0 inside the input box")
            })?;
            zeros
        }
    };
    Ok(DmbState {
        sequence,
        cycle_start: 0,
        cycle_index: 0,
    })
}

/// One cycle of the blocked controller, starting at `state.cycle_start` where
/// the plant is at `x_measured`.
///
/// Releases the first `P` samples, predicts the state at `cycle_start + N`
/// through the whole current sequence, solves the reduced problem there and
/// forms the next sequence as `current[P..N] ++ reduced solution`.
pub fn plan_cycle(
    problem: &MpcProblem,
    cfg: &DmbConfig,
    state: &DmbState,
    x_measured: &Vector,
) -> Result<(DmbPlan, DmbState)> {
    check_sequence_len(&state.sequence, cfg.horizon)?;
    state.sequence.check_box(&problem.input_box)?;
    let period = cfg.period();

    let applied = state.sequence.slice(0..period);
    let handover_state = predict_handover(&problem.plant, x_measured, &state.sequence)?;
    let solution = solve_reduced(problem, cfg, &handover_state)?;
    let next = state
        .sequence
        .slice(period..cfg.horizon)
        .concat(&solution.useq)?;

    let next_state = DmbState {
        sequence: next,
        cycle_start: state.cycle_start + period,
        cycle_index: state.cycle_index + 1,
    };
    Ok((
        DmbPlan {
            applied,
            handover_state,
            solution,
        },
        next_state,
    ))
}

/// `V_N^DMB(x) = δ(x) + V_{N−N_B}(x_{N_B})` with the blocked samples `ũ(N−N_B..N)`.
pub fn dmb_value(
    problem: &MpcProblem,
    cfg: &DmbConfig,
    x: &Vector,
    utilde: &ControlSequence,
) -> Result<f64> {
    check_sequence_len(utilde, cfg.horizon)?;
    let blocked = utilde.tail(cfg.blocking);
    let delta = blocked_prefix_cost(&problem.cost, &problem.plant, x, &blocked)?;
    let handover = predict_handover(&problem.plant, x, &blocked)?;
    Ok(delta + problem.value_function(cfg.reduced_horizon(), &handover)?)
}

fn check_sequence_len(seq: &ControlSequence, horizon: usize) -> Result<()> {
    if seq.len() != horizon {
        return Err(Error::contract(format!(
            "carried sequence has length {}, expected N = {horizon}",
            seq.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticStageCost;
    use crate::ocp::SolverSettings;
    use crate::plant::{InputBox, LinearPlant};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn example_problem() -> MpcProblem {
        MpcProblem::new(
            LinearPlant::new(
                Matrix::from_row_slice(2, 2, &[0.9, 0.0, 0.6, 0.4]),
                Matrix::from_row_slice(2, 1, &[0.1, 0.0]),
                Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
            )
            .unwrap(),
            QuadraticStageCost::new(Matrix::from_diagonal(&v(&[10.0, 100.0])), Matrix::identity(1, 1)).unwrap(),
            InputBox::uniform(1, -1.0, 1.0).unwrap(),
            SolverSettings::default(),
        )
        .unwrap()
    }

    fn scalar_problem() -> MpcProblem {
        MpcProblem::new(
            LinearPlant::with_full_output(Matrix::from_element(1, 1, 0.5), Matrix::from_element(1, 1, 1.0)).unwrap(),
            QuadraticStageCost::new(Matrix::identity(1, 1), Matrix::identity(1, 1)).unwrap(),
            InputBox::uniform(1, -10.0, 10.0).unwrap(),
            SolverSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DmbConfig::new(6, 3, 3).is_ok());
        let err = DmbConfig::new(6, 5, 3).unwrap_err().to_string();
        assert!(err.contains("N_B ≤ N−2"), "{err}");
        let err = DmbConfig::new(5, 2, 3).unwrap_err().to_string();
        assert!(err.contains("N_OP ≤ N_B"), "{err}");
        assert!(DmbConfig::new(6, 3, 0).is_err());
        let cfg = DmbConfig::new(7, 2, 1).unwrap();
        assert_eq!(cfg.period(), 5);
    }

    #[test]
    fn handover_examples() {
        let p = example_problem();
        let x = predict_handover(&p.plant, &v(&[1.0, -1.0]), &ControlSequence::zeros(1, 3)).unwrap();
        assert!((x[0] - 0.729).abs() < 1e-14 && (x[1] - 0.734).abs() < 1e-14);
        assert_eq!(predict_handover(&p.plant, &v(&[0.3, 0.1]), &ControlSequence::empty(1)).unwrap(), v(&[0.3, 0.1]));
        assert_eq!(predict_handover(&p.plant, &v(&[0.0, 0.0]), &ControlSequence::zeros(1, 4)).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn unblocked_prefix_matches_plain_solve() {
        let p = example_problem();
        let x = v(&[1.0, -1.0]);
        let a = solve_with_fixed_prefix(&p, 6, &x, &ControlSequence::empty(1)).unwrap();
        let b = p.solve(6, &x).unwrap();
        for (ua, ub) in a.useq.samples().iter().zip(b.useq.samples()) {
            assert!((ua[0] - ub[0]).abs() < 1e-9);
        }
        assert!((a.value - b.value).abs() <= 1e-9 * b.value);
    }

    #[test]
    fn blocked_scalar_decomposition() {
        // N = 3, N_B = 1, prefix 0 from x = 1: value = 1 + V_2(0.5).
        let p = scalar_problem();
        let sol = solve_with_fixed_prefix(&p, 3, &v(&[1.0]), &ControlSequence::scalar(&[0.0])).unwrap();
        let expected = 1.0 + p.value_function(2, &v(&[0.5])).unwrap();
        assert!((sol.value - expected).abs() < 1e-12);
        assert_eq!(sol.useq.samples()[0][0], 0.0);
        let reduced = p.solve(2, &v(&[0.5])).unwrap();
        for (a, b) in sol.useq.samples()[1..].iter().zip(reduced.useq.samples()) {
            assert!((a[0] - b[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn blocked_full_rejects_infeasible_prefix() {
        let p = example_problem();
        let cfg = DmbConfig::new(6, 3, 3).unwrap();
        let utilde = ControlSequence::scalar(&[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            solve_blocked_full(&p, &cfg, &v(&[1.0, -1.0]), &utilde),
            Err(Error::Contract(_))
        ));
        assert!(solve_blocked_full(&p, &cfg, &v(&[1.0, -1.0]), &ControlSequence::zeros(1, 5)).is_err());
    }

    #[test]
    fn reduced_examples() {
        let p = scalar_problem();
        let cfg = DmbConfig::new(4, 2, 1).unwrap();
        let sol = solve_reduced(&p, &cfg, &v(&[1.0])).unwrap();
        assert!((sol.useq.samples()[0][0] + 0.25).abs() < 1e-9);
        assert!((sol.value - 1.125).abs() < 1e-12);
        let zero = solve_reduced(&p, &cfg, &v(&[0.0])).unwrap();
        assert_eq!(zero.value, 0.0);

        let ex = example_problem();
        let cfg6 = DmbConfig::new(6, 3, 3).unwrap();
        let xh = v(&[0.729, 0.734]);
        assert_eq!(solve_reduced(&ex, &cfg6, &xh).unwrap(), ex.solve(3, &xh).unwrap());
    }

    #[test]
    fn bootstrap_examples() {
        let p = example_problem();
        let cfg = DmbConfig::new(6, 3, 3).unwrap();
        let s = bootstrap(&p, &cfg, &v(&[0.0, 0.0]), BootstrapKind::FullSolve).unwrap();
        assert!(s.sequence.samples().iter().all(|u| u[0] == 0.0));
        let s = bootstrap(&p, &cfg, &v(&[1.0, -1.0]), BootstrapKind::FullSolve).unwrap();
        assert_eq!(s.sequence.len(), 6);
        assert!(s.sequence.check_box(&p.input_box).is_ok());
        assert_eq!((s.cycle_start, s.cycle_index), (0, 0));

        let sp = scalar_problem();
        let cfg4 = DmbConfig::new(4, 1, 1).unwrap();
        let s = bootstrap(&sp, &cfg4, &v(&[1.0]), BootstrapKind::FullSolve).unwrap();
        assert_eq!(s.sequence, sp.solve(4, &v(&[1.0])).unwrap().useq);
        let z = bootstrap(&sp, &cfg4, &v(&[1.0]), BootstrapKind::Zeros).unwrap();
        assert_eq!(z.sequence, ControlSequence::zeros(1, 4));
    }

    #[test]
    fn plan_cycle_inherits_prefix_and_releases_head() {
        let p = example_problem();
        let cfg = DmbConfig::new(6, 3, 3).unwrap();
        let x0 = v(&[1.0, -1.0]);
        let s0 = bootstrap(&p, &cfg, &x0, BootstrapKind::FullSolve).unwrap();
        let (plan, s1) = plan_cycle(&p, &cfg, &s0, &x0).unwrap();
        assert_eq!(plan.applied, s0.sequence.slice(0..3));
        assert_eq!(s1.sequence.slice(0..3), s0.sequence.slice(3..6));
        assert_eq!(s1.sequence.slice(3..6), plan.solution.useq);
        assert_eq!((s1.cycle_start, s1.cycle_index), (3, 1));
        let predicted = predict_handover(&p.plant, &x0, &s0.sequence).unwrap();
        assert_eq!(plan.handover_state, predicted);

        // With P = N_B, the sample released at s1.cycle_start + N_B is the
        // first sample of the previous reduced solve.
        let x3 = propagate(&p.plant, &x0, &plan.applied).unwrap();
        let (_, s2) = plan_cycle(&p, &cfg, &s1, &x3).unwrap();
        assert_eq!(s2.cycle_start, s1.cycle_start + cfg.blocking);
        assert_eq!(s2.sequence.samples()[0], plan.solution.useq.samples()[0]);
    }

    #[test]
    fn plan_cycle_at_equilibrium() {
        let p = example_problem();
        let cfg = DmbConfig::new(6, 3, 3).unwrap();
        let s = DmbState {
            sequence: ControlSequence::zeros(1, 6),
            cycle_start: 0,
            cycle_index: 0,
        };
        let (plan, next) = plan_cycle(&p, &cfg, &s, &v(&[0.0, 0.0])).unwrap();
        assert_eq!(plan.applied, ControlSequence::zeros(1, 3));
        assert_eq!(next.sequence, ControlSequence::zeros(1, 6));
    }

    #[test]
    fn plan_cycle_rejects_out_of_box_sequence() {
        let p = example_problem();
        let cfg = DmbConfig::new(6, 3, 3).unwrap();
        let s = DmbState {
            sequence: ControlSequence::scalar(&[0.0, 0.0, 0.0, 0.0, 1.5, 0.0]),
            cycle_start: 0,
            cycle_index: 0,
        };
        assert!(matches!(plan_cycle(&p, &cfg, &s, &v(&[1.0, -1.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn dmb_value_examples() {
        // N = 3, N_B = 1 with blocked sample 0 from x = 1: δ = 1, V_2(0.5) = 0.28125.
        let p = scalar_problem();
        let cfg = DmbConfig::new(3, 1, 1).unwrap();
        let utilde = ControlSequence::scalar(&[0.3, -0.2, 0.0]);
        let val = dmb_value(&p, &cfg, &v(&[1.0]), &utilde).unwrap();
        assert!((val - (1.0 + 1.125 * 0.25)).abs() < 1e-12, "{val}");
        assert!(p.value_function(3, &v(&[1.0])).unwrap() <= val + 1e-9);

        let ex = example_problem();
        let cfg6 = DmbConfig::new(6, 3, 3).unwrap();
        assert_eq!(dmb_value(&ex, &cfg6, &v(&[0.0, 0.0]), &ControlSequence::zeros(1, 6)).unwrap(), 0.0);

        let x0 = v(&[1.0, -1.0]);
        let boot = bootstrap(&ex, &cfg6, &x0, BootstrapKind::FullSolve).unwrap();
        let vd = dmb_value(&ex, &cfg6, &x0, &boot.sequence).unwrap();
        assert!(vd.is_finite());
        assert!(ex.value_function(6, &x0).unwrap() <= vd + 1e-9);
    }
}

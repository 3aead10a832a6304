//! Closed-loop experiments: receding-horizon MPC against the blocked scheme.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::Serialize;

use crate::dmb::{bootstrap, plan_cycle, BootstrapKind, DmbConfig};
use crate::error::{check_dim, Error, Result};
use crate::objective::{trajectory_metric, MetricKind};
use crate::ocp::{MpcProblem, SolveStatus};
use crate::plant::Trajectory;
use crate::Vector;

/// One closed-loop experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: MpcProblem,
    pub dmb: DmbConfig,
    pub x0: Vector,
    /// Simulation length `T`.
    pub steps: usize,
    pub metric: MetricKind,
    pub bootstrap: BootstrapKind,
}

impl ExperimentConfig {
    pub fn new(
        problem: MpcProblem,
        dmb: DmbConfig,
        x0: Vector,
        steps: usize,
        metric: MetricKind,
        bootstrap: BootstrapKind,
    ) -> Result<Self> {
        check_dim("initial state", problem.state_dim(), x0.len())?;
        if steps < dmb.horizon {
            return Err(Error::config(
                "sim.T",
                format!("T ≥ N violated ({steps} < {})", dmb.horizon),
            ));
        }
        Ok(Self {
            problem,
            dmb,
            x0,
            steps,
            metric,
            bootstrap,
        })
    }

    /// Same experiment with a different length.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(
            self.problem.clone(),
            self.dmb,
            self.x0.clone(),
            steps,
            self.metric,
            self.bootstrap,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    RhReduced,
    RhFull,
    Dmb,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::RhReduced => "rh_reduced",
            ControllerKind::RhFull => "rh_full",
            ControllerKind::Dmb => "dmb",
        }
    }
}

/// Timing of one optimization, in plant steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveRecord {
    pub cycle: usize,
    pub launched: usize,
    pub ready: usize,
    /// First step that applies a sample produced by this solve.
    pub needed: usize,
    pub status: SolveStatus,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub controller: ControllerKind,
    /// Prediction horizon used by the controller.
    pub horizon: usize,
    pub trajectory: Trajectory,
    /// `ℓ(x(t), u(t))` for each applied step.
    pub stage_costs: Vec<f64>,
    /// Optimization cycle in charge of each applied step.
    pub cycle_indices: Vec<usize>,
    pub metric_values: BTreeMap<MetricKind, f64>,
    pub total_cost: f64,
    /// Optimizations performed during the run (the bootstrap solve excluded).
    pub cycles: usize,
    pub solves: Vec<SolveRecord>,
    pub bootstrap: Option<BootstrapKind>,
    /// Largest `‖x(t) − predicted handover‖∞` over handovers inside the run.
    pub max_handover_error: Option<f64>,
}

impl SimResult {
    fn finish(
        problem: &MpcProblem,
        controller: ControllerKind,
        horizon: usize,
        trajectory: Trajectory,
        cycle_indices: Vec<usize>,
        solves: Vec<SolveRecord>,
        bootstrap: Option<BootstrapKind>,
        max_handover_error: Option<f64>,
    ) -> Result<Self> {
        let stage_costs: Vec<f64> = trajectory.stages().map(|(x, u)| problem.stage(x, u)).collect();
        let cycles = cycle_indices.last().map_or(0, |&c| c + 1);
        Ok(Self {
            controller,
            horizon,
            metric_values: metric_values(problem, &trajectory)?,
            total_cost: stage_costs.iter().sum(),
            stage_costs,
            trajectory,
            cycle_indices,
            cycles,
            solves,
            bootstrap,
            max_handover_error,
        })
    }

    /// The first `steps` steps of this run with metrics recomputed.
    ///
    /// Controllers here never look ahead past the current step, so this equals
    /// a fresh run of length `steps`.
    pub fn truncated(&self, problem: &MpcProblem, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.trajectory.steps() {
            return Err(Error::contract(format!(
                "cannot truncate a {}-step run to {steps} steps",
                self.trajectory.steps()
            )));
        }
        let cycle_indices = self.cycle_indices[..steps].to_vec();
        let solves = self.solves.iter().filter(|s| s.cycle < cycle_indices[steps - 1] + 1).copied().collect();
        Self::finish(
            problem,
            self.controller,
            self.horizon,
            self.trajectory.prefix(steps),
            cycle_indices,
            solves,
            self.bootstrap,
            self.max_handover_error,
        )
    }

    pub fn metric(&self, kind: MetricKind) -> f64 {
        self.metric_values[&kind]
    }
}

fn metric_values(problem: &MpcProblem, traj: &Trajectory) -> Result<BTreeMap<MetricKind, f64>> {
    MetricKind::ALL
        .into_iter()
        .map(|k| Ok((k, trajectory_metric(k, &problem.cost, &problem.plant, traj)?)))
        .collect()
}

/// Receding-horizon MPC with one solve per step and no computation delay.
pub fn run_receding(cfg: &ExperimentConfig, horizon: usize) -> Result<SimResult> {
    if horizon == 0 {
        return Err(Error::contract("receding horizon must be at least 1"));
    }
    let problem = &cfg.problem;
    let mut traj = Trajectory::start(cfg.x0.clone(), problem.input_dim());
    let mut solves = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let sol = problem.solve(horizon, traj.last_state()).map_err(|e| e.at_step(t))?;
        solves.push(SolveRecord {
            cycle: t,
            launched: t,
            ready: t,
            needed: t,
            status: sol.status,
            kkt_residual: sol.kkt_residual,
        });
        traj.advance(&problem.plant, sol.useq.samples()[0].clone())
            .map_err(|e| e.at_step(t))?;
    }
    let kind = if horizon >= cfg.dmb.horizon {
        ControllerKind::RhFull
    } else {
        ControllerKind::RhReduced
    };
    SimResult::finish(problem, kind, horizon, traj, (0..cfg.steps).collect(), solves, None, None)
}

/// Blocked controller: bootstrap, then one cycle every `N − N_B` steps.
///
/// Each reduced solve is launched when its blocked window starts, occupies
/// `N_OP` steps and must be ready when the window ends.
pub fn run_dmb(cfg: &ExperimentConfig) -> Result<SimResult> {
    let d = cfg.dmb;
    if d.op_steps > d.blocking {
        return Err(Error::Admissibility(format!(
            "N_OP ≤ N_B violated ({} > {})",
            d.op_steps, d.blocking
        )));
    }
    let problem = &cfg.problem;
    let period = d.period();
    let mut state = bootstrap(problem, &d, &cfg.x0, cfg.bootstrap)?;
    let mut traj = Trajectory::start(cfg.x0.clone(), problem.input_dim());
    let mut cycle_indices = Vec::with_capacity(cfg.steps);
    let mut solves = Vec::new();
    let mut handovers: Vec<(usize, Vector)> = Vec::new();

    while traj.steps() < cfg.steps {
        let t0 = state.cycle_start;
        let (plan, next) =
            plan_cycle(problem, &d, &state, traj.last_state()).map_err(|e| e.at_step(t0))?;
        let record = SolveRecord {
            cycle: state.cycle_index,
            launched: t0 + period,
            ready: t0 + period + d.op_steps,
            needed: t0 + d.horizon,
            status: plan.solution.status,
            kkt_residual: plan.solution.kkt_residual,
        };
        if record.ready > record.needed {
            return Err(Error::Admissibility(format!(
                "solve of cycle {} ready at step {} but needed at {}",
                record.cycle, record.ready, record.needed
            ))
            .at_step(t0));
        }
        solves.push(record);
        handovers.push((t0 + d.horizon, plan.handover_state));

        for u in plan.applied.samples() {
            if traj.steps() == cfg.steps {
                break;
            }
            let t = traj.steps();
            traj.advance(&problem.plant, u.clone()).map_err(|e| e.at_step(t))?;
            cycle_indices.push(state.cycle_index);
        }
        state = next;
    }

    let max_handover_error = handovers
        .iter()
        .filter(|(t, _)| *t <= cfg.steps)
        .map(|(t, x)| (&traj.states()[*t] - x).amax())
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    SimResult::finish(
        problem,
        ControllerKind::Dmb,
        d.horizon,
        traj,
        cycle_indices,
        solves,
        Some(cfg.bootstrap),
        max_handover_error,
    )
}

/// Ratio `dmb / mpc` for one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRatio {
    pub ratio: f64,
    /// Set when the reference value is zero and the ratio is a convention.
    pub degenerate: bool,
}

pub fn metric_ratio(dmb: f64, mpc: f64) -> MetricRatio {
    if mpc == 0.0 {
        MetricRatio {
            ratio: if dmb == 0.0 { 1.0 } else { f64::INFINITY },
            degenerate: true,
        }
    } else {
        MetricRatio {
            ratio: dmb / mpc,
            degenerate: false,
        }
    }
}

/// Reduced-horizon receding MPC (`N − N_B`) next to the blocked controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub receding: SimResult,
    pub dmb: SimResult,
    pub ratios: BTreeMap<MetricKind, MetricRatio>,
    /// `‖x_dmb(t) − x_rh(t)‖₂` for `t = 0..=T`.
    pub state_error: Vec<f64>,
}

impl Comparison {
    fn from_runs(receding: SimResult, dmb: SimResult) -> Self {
        let ratios = MetricKind::ALL
            .into_iter()
            .map(|k| (k, metric_ratio(dmb.metric(k), receding.metric(k))))
            .collect();
        let state_error = receding
            .trajectory
            .states()
            .iter()
            .zip(dmb.trajectory.states())
            .map(|(a, b)| (a - b).norm())
            .collect();
        Self {
            receding,
            dmb,
            ratios,
            state_error,
        }
    }

    pub fn truncated(&self, problem: &MpcProblem, steps: usize) -> Result<Self> {
        Ok(Self::from_runs(
            self.receding.truncated(problem, steps)?,
            self.dmb.truncated(problem, steps)?,
        ))
    }

    pub fn max_state_error(&self) -> f64 {
        self.state_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn compare(cfg: &ExperimentConfig) -> Result<Comparison> {
    let receding = run_receding(cfg, cfg.dmb.reduced_horizon())?;
    let dmb = run_dmb(cfg)?;
    Ok(Comparison::from_runs(receding, dmb))
}

/// One `(metric, T)` point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub metric: MetricKind,
    pub steps: usize,
    pub mpc: f64,
    pub dmb: f64,
    pub ratio: f64,
    pub rel_err_mpc: f64,
    pub rel_err_dmb: f64,
}

impl SweepPoint {
    /// The worse of the two relative errors.
    pub fn mismatch(&self) -> f64 {
        self.rel_err_mpc.max(self.rel_err_dmb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub reference_mpc: f64,
    pub reference_dmb: f64,
    pub tolerance: f64,
    pub points: Vec<SweepPoint>,
    pub best: SweepPoint,
    /// The best point is within `tolerance` on both values.
    pub matched: bool,
}

/// Sweeps every metric over `steps`, matching `(mpc, dmb)` reference values.
///
/// One run of the longest length is simulated and shorter lengths are
/// evaluated on its prefixes.
pub fn sweep(
    cfg: &ExperimentConfig,
    steps: RangeInclusive<usize>,
    reference: (f64, f64),
    tolerance: f64,
) -> Result<SweepReport> {
    let (lo, hi) = (*steps.start(), *steps.end());
    if lo == 0 || lo > hi {
        return Err(Error::contract(format!("invalid sweep range {lo}..={hi}")));
    }
    let full = compare(&cfg.with_steps(hi.max(cfg.dmb.horizon))?)?;
    let rel = |v: f64, r: f64| ((v - r) / r).abs();
    let mut points = Vec::new();
    for t in steps {
        let c = full.truncated(&cfg.problem, t)?;
        for k in MetricKind::ALL {
            let (mpc, dmb) = (c.receding.metric(k), c.dmb.metric(k));
            points.push(SweepPoint {
                metric: k,
                steps: t,
                mpc,
                dmb,
                ratio: c.ratios[&k].ratio,
                rel_err_mpc: rel(mpc, reference.0),
                rel_err_dmb: rel(dmb, reference.1),
            });
        }
    }
    let best = *points
        .iter()
        .min_by(|a, b| a.mismatch().total_cmp(&b.mismatch()))
        .expect("sweep range is nonempty");
    Ok(SweepReport {
        reference_mpc: reference.0,
        reference_dmb: reference.1,
        tolerance,
        matched: best.mismatch() <= tolerance,
        points,
        best,
    })
}

/// Plot-ready rows `t, x.., u.., stage_cost, controller, cycle_index` with
/// 17 significant digits.
pub fn trajectory_csv(result: &SimResult) -> String {
    let traj = &result.trajectory;
    let n = traj.states()[0].len();
    let m = traj.inputs().input_dim();
    let mut out = String::from("t");
    for i in 0..n {
        let _ = write!(out, ",x{i}");
    }
    for j in 0..m {
        let _ = write!(out, ",u{j}");
    }
    out.push_str(",stage_cost,controller,cycle_index\n");
    for (t, (x, u)) in traj.stages().enumerate() {
        let _ = write!(out, "{t}");
        for v in x.iter().chain(u.iter()) {
            let _ = write!(out, ",{v:.16e}");
        }
        let _ = writeln!(
            out,
            ",{:.16e},{},{}",
            result.stage_costs[t],
            result.controller.name(),
            result.cycle_indices[t]
        );
    }
    out
}

/// JSON summary of one run; `config` is echoed verbatim.
pub fn summary_json(result: &SimResult, config: serde_json::Value) -> serde_json::Value {
    let metrics: BTreeMap<&str, f64> = result
        .metric_values
        .iter()
        .map(|(k, v)| (k.name(), *v))
        .collect();
    let last = result.trajectory.last_state();
    serde_json::json!({
        "controller": result.controller,
        "horizon": result.horizon,
        "steps": result.trajectory.steps(),
        "metric_values": metrics,
        "total_cost": result.total_cost,
        "cycles": result.cycles,
        "bootstrap": result.bootstrap,
        "max_handover_error": result.max_handover_error,
        "final_state": last.as_slice(),
        "final_state_norm": last.norm(),
        "solves_converged": result.solves.iter().all(|s| s.status == SolveStatus::Converged),
        "config": config,
    })
}

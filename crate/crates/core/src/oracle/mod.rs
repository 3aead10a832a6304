//! Exact finite-input dynamic programming for tiny instances.
//!
//! Inputs are restricted to a finite grid and every grid-valued sequence is
//! enumerated depth-first in lexicographic index order. Stage costs are
//! nonnegative, so a branch whose partial cost already reaches the incumbent
//! is cut without changing the result or the lexicographic tie-break.

pub mod suite;

use std::collections::BTreeSet;

use crate::error::{check_dim, Error, Result};
use crate::objective::{blocked_prefix_cost, StageCost};
use crate::plant::{propagate, ControlSequence, InputBox, StateMap, Trajectory};
use crate::Vector;

/// Maximum `|grid|^N` a single enumeration may visit.
pub const ENUMERATION_BUDGET: f64 = 1e7;

/// Finite set of admissible inputs, in enumeration order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrid {
    points: Vec<Vector>,
}

impl InputGrid {
    pub fn new(points: Vec<Vector>, bounds: &InputBox) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("input grid is empty"));
        }
        for (i, p) in points.iter().enumerate() {
            check_dim("grid point", bounds.dim(), p.len())?;
            if !bounds.contains(p) {
                return Err(Error::contract(format!("grid point {i} lies outside the input box")));
            }
            if points[..i].contains(p) {
                return Err(Error::contract(format!("grid point {i} is a duplicate")));
            }
        }
        Ok(Self { points })
    }

    /// Scalar grid inside `[lo, hi]`.
    pub fn scalar(values: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let bounds = InputBox::uniform(1, lo, hi)?;
        Self::new(values.iter().map(|&v| Vector::from_element(1, v)).collect(), &bounds)
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.points[0].len()
    }

    fn check_budget(&self, horizon: usize) -> Result<()> {
        let needed = (self.len() as f64).powi(horizon as i32);
        if needed > ENUMERATION_BUDGET {
            return Err(Error::OracleCapacity {
                needed,
                budget: ENUMERATION_BUDGET,
            });
        }
        Ok(())
    }
}

/// Exact grid-restricted minimum and its lexicographically first minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub value: f64,
    pub argseq: ControlSequence,
}

struct Search<'a, M: ?Sized, C: ?Sized> {
    map: &'a M,
    cost: &'a C,
    grid: &'a InputGrid,
    horizon: usize,
    path: Vec<usize>,
    best_value: f64,
    best_path: Vec<usize>,
}

impl<M: StateMap + ?Sized, C: StageCost + ?Sized> Search<'_, M, C> {
    fn descend(&mut self, x: &Vector, partial: f64) {
        if self.path.len() == self.horizon {
            if partial < self.best_value {
                self.best_value = partial;
                self.best_path.clone_from(&self.path);
            }
            return;
        }
        for (i, u) in self.grid.points.iter().enumerate() {
            let total = partial + self.cost.stage(x, u);
            if total >= self.best_value {
                continue;
            }
            let next = self.map.next_state(x, u);
            self.path.push(i);
            self.descend(&next, total);
            self.path.pop();
        }
    }
}

/// `V_N(x0)` over grid-valued sequences.
pub fn dp_value<M, C>(map: &M, cost: &C, grid: &InputGrid, horizon: usize, x0: &Vector) -> Result<DpSolution>
where
    M: StateMap + ?Sized,
    C: StageCost + ?Sized,
{
    if horizon == 0 {
        return Err(Error::contract("dp_value needs N ≥ 1"));
    }
    check_dim("initial state", map.state_dim(), x0.len())?;
    check_dim("grid input", map.input_dim(), grid.input_dim())?;
    grid.check_budget(horizon)?;

    let mut search = Search {
        map,
        cost,
        grid,
        horizon,
        path: Vec::with_capacity(horizon),
        best_value: f64::INFINITY,
        best_path: Vec::new(),
    };
    search.descend(x0, 0.0);
    if search.best_path.len() != horizon {
        return Err(Error::Solver("oracle found no finite-cost sequence".into()));
    }
    let samples = search.best_path.iter().map(|&i| grid.points[i].clone()).collect();
    Ok(DpSolution {
        value: search.best_value,
        argseq: ControlSequence::new(grid.input_dim(), samples)?,
    })
}

/// `V_N(x)` with `V_0 ≡ 0`.
fn dp_value_or_zero<M, C>(map: &M, cost: &C, grid: &InputGrid, horizon: usize, x: &Vector) -> Result<f64>
where
    M: StateMap + ?Sized,
    C: StageCost + ?Sized,
{
    if horizon == 0 {
        Ok(0.0)
    } else {
        Ok(dp_value(map, cost, grid, horizon, x)?.value)
    }
}

/// Exact `V_N^DMB(x0) = δ(x0) + V_{N−N_B}(x_{N_B})`. The blocked samples need
/// not lie on the grid.
pub fn dp_dmb_value<M, C>(
    map: &M,
    cost: &C,
    grid: &InputGrid,
    horizon: usize,
    x0: &Vector,
    blocked: &ControlSequence,
) -> Result<f64>
where
    M: StateMap + ?Sized,
    C: StageCost + ?Sized,
{
    if blocked.len() > horizon {
        return Err(Error::contract(format!(
            "{} blocked samples exceed horizon {horizon}",
            blocked.len()
        )));
    }
    let delta = blocked_prefix_cost(cost, map, x0, blocked)?;
    let handover = propagate(map, x0, blocked)?;
    Ok(delta + dp_value_or_zero(map, cost, grid, horizon - blocked.len(), &handover)?)
}

/// `steps`-step receding-horizon closed loop with the exact grid minimizer.
pub fn dp_policy_rollout<M, C>(
    map: &M,
    cost: &C,
    grid: &InputGrid,
    horizon: usize,
    x0: &Vector,
    steps: usize,
) -> Result<Trajectory>
where
    M: StateMap + ?Sized,
    C: StageCost + ?Sized,
{
    let mut traj = Trajectory::start(x0.clone(), grid.input_dim());
    for t in 0..steps {
        let sol = dp_value(map, cost, grid, horizon, traj.last_state()).map_err(|e| e.at_step(t))?;
        traj.advance(map, sol.argseq.samples()[0].clone())?;
    }
    Ok(traj)
}

/// Blocked closed loop on the grid: bootstrap with the exact horizon-`N`
/// sequence, then cycle with period `N − N_B`, each cycle solving the reduced
/// problem from the state predicted at the cycle start plus `N`.
pub fn dp_dmb_rollout<M, C>(
    map: &M,
    cost: &C,
    grid: &InputGrid,
    horizon: usize,
    blocking: usize,
    x0: &Vector,
    steps: usize,
) -> Result<Trajectory>
where
    M: StateMap + ?Sized,
    C: StageCost + ?Sized,
{
    if blocking + 1 > horizon {
        return Err(Error::contract(format!("N_B = {blocking} leaves no free inputs in N = {horizon}")));
    }
    let period = horizon - blocking;
    let mut sequence = dp_value(map, cost, grid, horizon, x0)?.argseq;
    let mut traj = Trajectory::start(x0.clone(), grid.input_dim());
    while traj.steps() < steps {
        let handover = propagate(map, traj.last_state(), &sequence)?;
        let tail = dp_value(map, cost, grid, period, &handover)
            .map_err(|e| e.at_step(traj.steps()))?
            .argseq;
        for u in sequence.samples()[..period].iter() {
            if traj.steps() == steps {
                break;
            }
            traj.advance(map, u.clone())?;
        }
        sequence = sequence.slice(period..horizon).concat(&tail)?;
    }
    Ok(traj)
}

/// Stage cost summed over the applied steps of `traj`.
pub fn closed_loop_cost<C: StageCost + ?Sized>(cost: &C, traj: &Trajectory) -> f64 {
    traj.stages().map(|(x, u)| cost.stage(x, u)).sum()
}

/// Distinct states reachable from `x0` in at most `depth` grid-input steps,
/// in first-visit order.
pub fn reachable_states<M>(map: &M, grid: &InputGrid, x0: &Vector, depth: usize) -> Result<Vec<Vector>>
where
    M: StateMap + ?Sized,
{
    check_dim("initial state", map.state_dim(), x0.len())?;
    let key = |x: &Vector| x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut seen = BTreeSet::new();
    seen.insert(key(x0));
    let mut all = vec![x0.clone()];
    let mut frontier = vec![x0.clone()];
    for _ in 0..depth {
        let mut next_frontier = Vec::new();
        for x in &frontier {
            for u in grid.points() {
                let next = map.next_state(x, u);
                if seen.insert(key(&next)) {
                    next_frontier.push(next.clone());
                    all.push(next);
                }
            }
        }
        if (all.len() as f64) > ENUMERATION_BUDGET {
            return Err(Error::OracleCapacity {
                needed: all.len() as f64,
                budget: ENUMERATION_BUDGET,
            });
        }
        frontier = next_frontier;
    }
    Ok(all)
}

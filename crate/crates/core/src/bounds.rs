//! Growth-constant estimation and the suboptimality / stability bounds of the
//! reduced-horizon and blocked controllers.
//!
//! With `h = N − N_B` the reduced horizon, everything is a function of the
//! ratio `r = γ^h / (γ+1)^{h−2}`:
//!
//! ```text
//! η = 1 / (1 + r)        α = 1 − r        υ = 1 / (1 − r)        υ − 1 = r / (1 − r)
//! ```
//!
//! The bounds need `(γ+1)^{h−2} > γ^h`, i.e. `r < 1`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ocp::MpcProblem;
use crate::Vector;

/// Denominators below this are treated as 0/0 and the state is skipped.
pub const DENOMINATOR_GUARD: f64 = 1e-12;
/// Above this horizon the powers are formed in log space.
const LOG_SPACE_HORIZON: usize = 300;

struct Powers {
    /// `(γ+1)^{h−2}`
    grow: f64,
    /// `γ^h`
    shrink: f64,
    /// `γ^h / (γ+1)^{h−2}`
    ratio: f64,
}

fn powers(gamma: f64, h: usize) -> Result<Powers> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Admissibility(format!("γ must be a finite nonnegative number, got {gamma}")));
    }
    if h < 2 {
        return Err(Error::Admissibility(format!(
            "reduced horizon N−N_B = {h} < 2"
        )));
    }
    let hp = h as i32;
    if h <= LOG_SPACE_HORIZON {
        let grow = (gamma + 1.0).powi(hp - 2);
        let shrink = gamma.powi(hp);
        Ok(Powers {
            grow,
            shrink,
            ratio: shrink / grow,
        })
    } else {
        let log_ratio = h as f64 * gamma.ln() - (h - 2) as f64 * gamma.ln_1p();
        Ok(Powers {
            grow: ((h - 2) as f64 * gamma.ln_1p()).exp(),
            shrink: (h as f64 * gamma.ln()).exp(),
            ratio: log_ratio.exp(),
        })
    }
}

/// Shrinking factor `η(γ, h) = (γ+1)^{h−2} / ((γ+1)^{h−2} + γ^h)`.
pub fn eta(gamma: f64, h: usize) -> Result<f64> {
    let p = powers(gamma, h)?;
    if h <= LOG_SPACE_HORIZON {
        Ok(p.grow / (p.grow + p.shrink))
    } else {
        Ok(1.0 / (1.0 + p.ratio))
    }
}

/// `α`, `υ = 1/α` and the relative bound `υ − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityMargin {
    pub alpha: f64,
    pub upsilon: f64,
    pub relative_bound: f64,
}

/// Fails unless `(γ+1)^{h−2} > γ^h`.
pub fn stability_margin(gamma: f64, h: usize) -> Result<StabilityMargin> {
    let p = powers(gamma, h)?;
    if !(p.ratio < 1.0) {
        return Err(Error::Admissibility(format!(
            "(γ+1)^(h−2) > γ^h violated for γ = {gamma}, h = {h}: {} ≤ {}",
            p.grow, p.shrink
        )));
    }
    if h <= LOG_SPACE_HORIZON {
        let gap = p.grow - p.shrink;
        Ok(StabilityMargin {
            alpha: gap / p.grow,
            upsilon: p.grow / gap,
            relative_bound: p.shrink / gap,
        })
    } else {
        Ok(StabilityMargin {
            alpha: 1.0 - p.ratio,
            upsilon: 1.0 / (1.0 - p.ratio),
            relative_bound: p.ratio / (1.0 - p.ratio),
        })
    }
}

/// `N_OP ≤ N_B ≤ N − 2`.
pub fn check_first_bound(horizon: usize, blocking: usize, op_steps: usize) -> bool {
    op_steps <= blocking && blocking + 2 <= horizon
}

/// Strict upper bound on `N_B`: `N − 2 log(γ+1) / (log(γ+1) − log γ)`.
pub fn nb_upper_bound(gamma: f64, horizon: usize) -> f64 {
    let lg1 = gamma.ln_1p();
    horizon as f64 - 2.0 * lg1 / (lg1 - gamma.ln())
}

/// Relative suboptimality bound of the blocked controller:
/// `γ^h / ((γ+1)^{h−2} − γ^h) + δ / V_∞`.
pub fn overall_bound(gamma: f64, horizon: usize, blocking: usize, delta: f64, v_inf: f64) -> Result<f64> {
    if !(v_inf > 0.0) {
        return Err(Error::contract(format!("V_∞ must be positive, got {v_inf}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::contract(format!("δ must be nonnegative, got {delta}")));
    }
    let h = horizon.checked_sub(blocking).ok_or_else(|| {
        Error::Admissibility(format!("N_B = {blocking} exceeds N = {horizon}"))
    })?;
    Ok(stability_margin(gamma, h)?.relative_bound + delta / v_inf)
}

/// Sampled estimate of the growth constant γ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// States that entered the maximum.
    pub samples: usize,
    /// States skipped because a denominator fell below the guard.
    pub skipped: usize,
    pub worst_state: Vec<f64>,
    pub horizon_checked: usize,
}

/// Values needed at one state for horizon `k`: `V_k(x)` and `ℓ(x, μ_k(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonValues {
    pub value: f64,
    pub stage_at_law: f64,
}

/// γ̂ = max over states of `max(V_2/V_1 − 1, max_{k=2..N} V_k/ℓ(x, μ_k(x)) − 1)`.
///
/// `eval(x, k)` supplies the horizon-`k` quantities, so the same estimator
/// serves the continuous solver and the exhaustive oracle. The worst state is
/// the lexicographically smallest among ties.
pub fn estimate_gamma_with<F>(horizon: usize, states: &[Vector], mut eval: F) -> Result<GammaEstimate>
where
    F: FnMut(&Vector, usize) -> Result<HorizonValues>,
{
    if horizon < 2 {
        return Err(Error::Estimation(format!("horizon {horizon} < 2")));
    }
    if states.is_empty() {
        return Err(Error::Estimation("empty sample set".into()));
    }
    let mut best: Option<(f64, &Vector)> = None;
    let mut used = 0;
    let mut skipped = 0;

    'states: for x in states {
        let v1 = eval(x, 1)?.value;
        if v1 < DENOMINATOR_GUARD {
            skipped += 1;
            continue;
        }
        let mut worst = eval(x, 2)?.value / v1 - 1.0;
        for k in 2..=horizon {
            let hv = eval(x, k)?;
            if hv.stage_at_law < DENOMINATOR_GUARD {
                skipped += 1;
                continue 'states;
            }
            worst = worst.max(hv.value / hv.stage_at_law - 1.0);
        }
        used += 1;
        let replace = match best {
            None => true,
            Some((g, s)) => worst > g || (worst == g && lex_less(x, s)),
        };
        if replace {
            best = Some((worst, x));
        }
    }

    match best {
        Some((gamma, x)) => Ok(GammaEstimate {
            gamma,
            samples: used,
            skipped,
            worst_state: x.iter().copied().collect(),
            horizon_checked: horizon,
        }),
        None => Err(Error::Estimation(format!(
            "all {skipped} sample states were skipped (denominators below {DENOMINATOR_GUARD:e})"
        ))),
    }
}

fn lex_less(a: &Vector, b: &Vector) -> bool {
    a.iter()
        .zip(b.iter())
        .find(|(x, y)| x != y)
        .is_some_and(|(x, y)| x < y)
}

/// γ̂ from the continuous solver over `states`.
pub fn estimate_gamma(problem: &MpcProblem, horizon: usize, states: &[Vector]) -> Result<GammaEstimate> {
    estimate_gamma_with(horizon, states, |x, k| {
        let sol = problem.solve(k, x)?;
        Ok(HorizonValues {
            value: sol.value,
            stage_at_law: problem.stage(x, &sol.useq.samples()[0]),
        })
    })
}

/// Bound summary for one `(γ, N, N_B)` choice.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma: f64,
    pub N: usize,
    pub N_B: usize,
    pub eta: f64,
    pub alpha: f64,
    /// `None` when `(γ+1)^{h−2} > γ^h` fails.
    pub upsilon: Option<f64>,
    pub relative_bound: Option<f64>,
    pub nb_upper: f64,
    pub first_bound_ok: bool,
    pub assumption_ok: bool,
    pub delta_over_vinf: Option<f64>,
    pub overall_bound: Option<f64>,
}

impl BoundReport {
    /// `delta_vinf` is `(δ(x), V_∞(x))` at the state of interest, when known.
    pub fn new(
        gamma: f64,
        horizon: usize,
        blocking: usize,
        op_steps: usize,
        delta_vinf: Option<(f64, f64)>,
    ) -> Result<Self> {
        let h = horizon.checked_sub(blocking).filter(|h| *h >= 2).ok_or_else(|| {
            Error::Admissibility(format!("reduced horizon N−N_B must be ≥ 2 (N = {horizon}, N_B = {blocking})"))
        })?;
        let eta = eta(gamma, h)?;
        let p = powers(gamma, h)?;
        let margin = stability_margin(gamma, h).ok();
        let delta_over_vinf = match delta_vinf {
            Some((delta, v_inf)) if v_inf > 0.0 => Some(delta / v_inf),
            _ => None,
        };
        Ok(Self {
            gamma,
            N: horizon,
            N_B: blocking,
            eta,
            alpha: 1.0 - p.ratio,
            upsilon: margin.map(|m| m.upsilon),
            relative_bound: margin.map(|m| m.relative_bound),
            nb_upper: nb_upper_bound(gamma, horizon),
            first_bound_ok: check_first_bound(horizon, blocking, op_steps),
            assumption_ok: margin.is_some(),
            delta_over_vinf,
            overall_bound: margin.zip(delta_over_vinf).map(|(m, d)| m.relative_bound + d),
        })
    }
}

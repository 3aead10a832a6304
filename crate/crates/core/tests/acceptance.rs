//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::Cholesky;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmb_mpc::bounds::{eta, nb_upper_bound, stability_margin};
use dmb_mpc::config::{parse_config_str, EXAMPLE_CONFIG};
use dmb_mpc::objective::MetricKind;
use dmb_mpc::ocp::{solve_box_qp, MpcProblem};
use dmb_mpc::oracle::suite::{
    builtin_instances, certified_cases, equivalence_gap, grid_sequences, random_instance, ranking_costs,
    scalar_instance,
};
use dmb_mpc::oracle::{dp_dmb_value, dp_value};
use dmb_mpc::plant::{rollout, ControlSequence, InputBox};
use dmb_mpc::simulator::{compare, run_dmb, run_receding, sweep};
use dmb_mpc::{Matrix, Vector};

fn report(id: u32, name: &str, elapsed: Duration, limit: Duration, failures: &[String]) {
    let ok = failures.is_empty() && elapsed < limit;
    // Written to the raw handle so the line survives the test harness's output capture.
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id} [{}] {name} ({:.3} s, limit {} s){}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if failures.is_empty() { String::new() } else { format!(": {}", failures.join("; ")) }
    );
    assert!(failures.is_empty(), "criterion {id} failed: {failures:?}");
    assert!(elapsed < limit, "criterion {id} took {elapsed:?}");
}

#[test]
fn criterion_1_example_reproduction() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap();
    let rep = sweep(&cfg, 30..=150, (15.9134, 16.1334), 0.02).unwrap();
    for p in &rep.points {
        if !(1.0..=1.05).contains(&p.ratio) {
            failures.push(format!("{} at T={}: ratio {}", p.metric, p.steps, p.ratio));
        }
    }
    if !rep.matched {
        failures.push(format!("no (metric, T) within 2%; best {:?}", rep.best));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_dmb-mpc"))
        .arg("reproduce-example")
        .output()
        .unwrap();
    if !out.status.success() {
        failures.push(format!("reproduce-example exited with {}", out.status));
    }
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    println!(
        "  matched definition: {} at T={} (MPC {:.4}, DMB {:.4}, ratio {:.4})",
        json["best"]["metric"], json["best"]["steps"], rep.best.mpc, rep.best.dmb, rep.best.ratio
    );
    report(1, "example reproduction", start.elapsed(), Duration::from_secs(10), &failures);
}

#[test]
fn criterion_2_blocked_reduced_equivalence() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let count = 60;
    for i in 0..count {
        let inst = random_instance(&mut rng);
        assert!(inst.problem.state_dim() <= 3 && inst.problem.input_dim() <= 2 && inst.cfg.horizon <= 8);
        inst.blocked.check_box(&inst.problem.input_box).unwrap();
        let gap = equivalence_gap(&inst).unwrap();
        if gap.tail > 1e-6 {
            failures.push(format!("instance {i}: tail gap {}", gap.tail));
        }
        if gap.value_rel > 1e-8 {
            failures.push(format!("instance {i}: relative value gap {}", gap.value_rel));
        }
    }
    report(2, "blocked/reduced equivalence (60 instances)", start.elapsed(), Duration::from_secs(5), &failures);
}

#[test]
fn criterion_3_exact_blocking_suboptimality_and_monotonicity() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let inst = scalar_instance();
    let p = &inst.problem;
    let grid = &inst.grid;
    assert_eq!(grid.len(), 3);
    let mut cases = 0usize;
    for x0 in [-3.0, -1.0, 0.5, 1.0, 3.0] {
        let x = Vector::from_element(1, x0);
        for n in 3..=8 {
            let full = dp_value(&p.plant, &p.cost, grid, n, &x).unwrap().value;
            for nb in 1..=n - 2 {
                if 3f64.powi(nb as i32) > 1e4 {
                    continue;
                }
                for prefix in grid_sequences(grid, nb) {
                    let blocked = dp_dmb_value(&p.plant, &p.cost, grid, n, &x, &prefix).unwrap();
                    cases += 1;
                    if full > blocked + 1e-12 {
                        failures.push(format!("x0={x0} N={n} N_B={nb}: {full} > {blocked}"));
                    }
                }
            }
            for parent in grid_sequences(grid, n - 2) {
                let mut prev = f64::NEG_INFINITY;
                for nb in 1..=n - 2 {
                    let cur = dp_dmb_value(&p.plant, &p.cost, grid, n, &x, &parent.slice(0..nb)).unwrap();
                    if cur < prev - 1e-12 {
                        failures.push(format!("x0={x0} N={n}: V^DMB decreased at N_B={nb}"));
                    }
                    prev = cur;
                }
            }
        }
    }
    println!("  {cases} blocked prefixes checked");
    report(3, "exact blocking suboptimality and N_B monotonicity", start.elapsed(), Duration::from_secs(5), &failures);
}

#[test]
fn criterion_4_infinite_horizon_ranking() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for inst in builtin_instances() {
        for &nb in &inst.blockings {
            let c = ranking_costs(&inst, nb).unwrap();
            if !c.converged {
                failures.push(format!("{} N_B={nb}: tail not converged", inst.name));
            }
            if c.v_inf_proxy > c.receding + 1e-8 {
                failures.push(format!("{} N_B={nb}: proxy {} > receding {}", inst.name, c.v_inf_proxy, c.receding));
            }
            if c.receding > c.dmb + 1e-8 {
                failures.push(format!("{} N_B={nb}: receding {} > DMB {}", inst.name, c.receding, c.dmb));
            }
        }
    }
    report(4, "infinite-horizon ranking", start.elapsed(), Duration::from_secs(5), &failures);
}

#[test]
fn criterion_5_bound_formulas() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let close = |failures: &mut Vec<String>, what: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };
    let m = stability_margin(1.0, 3).unwrap();
    close(&mut failures, "eta(1,3)", eta(1.0, 3).unwrap(), 2.0 / 3.0);
    close(&mut failures, "alpha(1,3)", m.alpha, 0.5);
    close(&mut failures, "upsilon(1,3)", m.upsilon, 2.0);
    close(&mut failures, "relative_bound(1,3)", m.relative_bound, 1.0);
    close(&mut failures, "nb_upper_bound(1,6)", nb_upper_bound(1.0, 6), 4.0);
    let mut grid_points = 0;
    for gamma in [0.1, 0.5, 1.0, 2.0] {
        for h in 2..=8 {
            if (gamma + 1.0f64).powi(h as i32 - 2) > gamma.powi(h as i32) {
                let m = stability_margin(gamma, h).unwrap();
                close(&mut failures, &format!("υ·α at γ={gamma}, h={h}"), m.upsilon * m.alpha, 1.0);
                grid_points += 1;
            } else if stability_margin(gamma, h).is_ok() {
                failures.push(format!("γ={gamma}, h={h} accepted though the assumption fails"));
            }
        }
    }
    assert!(grid_points > 20);
    report(5, "bound formulas", start.elapsed(), Duration::from_secs(5), &failures);
}

#[test]
fn criterion_6_certified_bound_holds() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut applicable = 0;
    for inst in builtin_instances() {
        for c in certified_cases(&inst).unwrap() {
            let (Some(rb), Some(ob)) = (c.relative_bound, c.overall_bound) else {
                continue;
            };
            applicable += 1;
            println!(
                "  {} N_B={}: γ̂={:.4}, receding {:.3e} ≤ {:.3e}, DMB {:.3e} ≤ {:.3e}",
                inst.name, c.blocking, c.gamma, c.measured_receding, rb, c.measured_dmb, ob
            );
            if c.measured_receding > rb + 1e-9 {
                failures.push(format!("{} N_B={}: receding {} > {rb}", inst.name, c.blocking, c.measured_receding));
            }
            if c.measured_dmb > ob + 1e-9 {
                failures.push(format!("{} N_B={}: DMB {} > {ob}", inst.name, c.blocking, c.measured_dmb));
            }
        }
    }
    if applicable == 0 {
        failures.push("no instance satisfies the growth assumption".into());
    }
    report(6, "certified suboptimality bounds", start.elapsed(), Duration::from_secs(10), &failures);
}

/// `H` and `g` of the stacked-input QP, with the prediction matrices built
/// column by column from unit-input rollouts.
fn batch_matrices(problem: &MpcProblem, n: usize, x0: &Vector) -> (Matrix, Vector) {
    let (nx, m) = (problem.state_dim(), problem.input_dim());
    let dim = n * m;
    let q = problem.cost.q();
    let r = problem.cost.r();
    let free = rollout(&problem.plant, x0, &ControlSequence::zeros(m, n)).unwrap();
    let mut gammas = vec![Matrix::zeros(nx, dim); n];
    for j in 0..dim {
        let unit = Vector::from_fn(dim, |i, _| if i == j { 1.0 } else { 0.0 });
        let resp = rollout(&problem.plant, &Vector::zeros(nx), &ControlSequence::from_stacked(m, &unit).unwrap()).unwrap();
        for (k, gamma) in gammas.iter_mut().enumerate() {
            gamma.set_column(j, &resp.states()[k]);
        }
    }
    let mut h = Matrix::zeros(dim, dim);
    let mut g = Vector::zeros(dim);
    for (k, gamma) in gammas.iter().enumerate() {
        h += gamma.transpose() * q * gamma * 2.0;
        g += gamma.transpose() * q * (&free.states()[k] - problem.cost.target()) * 2.0;
        h.view_mut((k * m, k * m), (m, m)).zip_apply(r, |a, b| *a += 2.0 * b);
    }
    (h, g)
}

#[test]
fn criterion_7_solver_correctness() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..40 {
        let inst = random_instance(&mut rng);
        let n = inst.cfg.horizon;
        let m = inst.problem.input_dim();

        let mut free = inst.problem.clone();
        free.input_box = InputBox::unbounded(m);
        let qp = free.condense(n, &inst.x0).unwrap();
        let zero = Vector::zeros(n * m);
        let sol = solve_box_qp(&qp, &free.settings, Some(&zero)).unwrap();
        let (h, g) = batch_matrices(&free, n, &inst.x0);
        let batch = -Cholesky::new(h).expect("positive definite").solve(&g);
        let err = (&sol.u - &batch).amax();
        if err > 1e-8 {
            failures.push(format!("instance {i}: unconstrained error {err}"));
        }

        let qp = inst.problem.condense(n, &inst.x0).unwrap();
        let start_u = Vector::from_fn(n * m, |_, _| rng.gen_range(-0.1..0.1));
        let sol = solve_box_qp(&qp, &inst.problem.settings, Some(&qp.project(&start_u))).unwrap();
        let grad = qp.gradient(&sol.u);
        for k in 0..n * m {
            let (lo, hi, u, gk) = (qp.lower[k], qp.upper[k], sol.u[k], grad[k]);
            let at_lo = u - lo <= 1e-9;
            let at_hi = hi - u <= 1e-9;
            // Stationarity with sign-correct multipliers on active bounds.
            let violation = if u < lo || u > hi {
                f64::INFINITY
            } else if at_lo && at_hi {
                0.0
            } else if at_lo {
                (-gk).max(0.0)
            } else if at_hi {
                gk.max(0.0)
            } else {
                gk.abs()
            };
            if violation > 1e-9 {
                failures.push(format!("instance {i}: KKT violation {violation} at component {k}"));
            }
        }
    }

    let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap();
    let a = compare(&cfg).unwrap();
    let b = compare(&cfg).unwrap();
    if a != b {
        failures.push("repeat runs of the shipped config differ".into());
    }
    report(7, "solver correctness and determinism", start.elapsed(), Duration::from_secs(10), &failures);
}

#[test]
fn criterion_8_closed_loop_regulation() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap().with_steps(100).unwrap();
    let rh = run_receding(&cfg, cfg.dmb.reduced_horizon()).unwrap();
    let dmb = run_dmb(&cfg).unwrap();
    for r in [&rh, &dmb] {
        let norm = r.trajectory.last_state().norm();
        println!("  {}: ‖x(100)‖ = {norm:.3e}", r.controller.name());
        if !(norm < 1e-4) {
            failures.push(format!("{}: ‖x(100)‖ = {norm}", r.controller.name()));
        }
    }
    assert_eq!(MetricKind::ALL.len(), rh.metric_values.len());
    report(8, "closed-loop regulation", start.elapsed(), Duration::from_secs(10), &failures);
}

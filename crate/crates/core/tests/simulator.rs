use dmb_mpc::config::{parse_config_str, EXAMPLE_CONFIG};
use dmb_mpc::dmb::{BootstrapKind, DmbConfig};
use dmb_mpc::objective::MetricKind;
use dmb_mpc::simulator::{compare, run_dmb, run_receding, trajectory_csv, ControllerKind, ExperimentConfig};

fn example(steps: usize) -> ExperimentConfig {
    parse_config_str(EXAMPLE_CONFIG).unwrap().with_steps(steps).unwrap()
}

fn with_blocking(cfg: &ExperimentConfig, nb: usize, nop: usize) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.dmb = DmbConfig::new(cfg.dmb.horizon, nb, nop).unwrap();
    c
}

#[test]
fn runs_are_bit_identical() {
    let cfg = example(40);
    let a = run_dmb(&cfg).unwrap();
    let b = run_dmb(&cfg).unwrap();
    assert_eq!(trajectory_csv(&a), trajectory_csv(&b));
    let r1 = run_receding(&cfg, 3).unwrap();
    let r2 = run_receding(&cfg, 3).unwrap();
    assert_eq!(trajectory_csv(&r1), trajectory_csv(&r2));
}

#[test]
fn applied_inputs_respect_the_box() {
    let cfg = example(60);
    for res in [run_dmb(&cfg).unwrap(), run_receding(&cfg, 3).unwrap(), run_receding(&cfg, 6).unwrap()] {
        res.trajectory.inputs().check_box(&cfg.problem.input_box).unwrap();
        assert!(res.trajectory.is_consistent(&cfg.problem.plant, 0.0));
        assert_eq!(res.trajectory.steps(), 60);
    }
}

#[test]
fn cycle_count_and_solve_timing() {
    let base = example(50);
    for nb in 1..=4 {
        for nop in 1..=nb {
            let cfg = with_blocking(&base, nb, nop);
            let p = cfg.dmb.period();
            let res = run_dmb(&cfg).unwrap();
            assert_eq!(res.cycles, cfg.steps.div_ceil(p), "N_B={nb}");
            assert_eq!(res.solves.len(), res.cycles);
            for s in &res.solves {
                assert!(s.ready <= s.needed);
                assert_eq!(s.needed - s.launched, nb);
            }
            for (t, &c) in res.cycle_indices.iter().enumerate() {
                assert_eq!(c, t / p);
            }
        }
    }
}

#[test]
fn handover_prediction_is_exact_for_the_nominal_plant() {
    let base = example(80);
    for nb in 1..=4 {
        let res = run_dmb(&with_blocking(&base, nb, nb)).unwrap();
        let err = res.max_handover_error.unwrap_or(0.0);
        assert!(err < 1e-10, "N_B={nb}: {err:e}");
    }
}

#[test]
fn zero_bootstrap_idles_until_the_first_optimized_sample() {
    let mut cfg = example(30);
    cfg.bootstrap = BootstrapKind::Zeros;
    let res = run_dmb(&cfg).unwrap();
    let inputs = res.trajectory.inputs().samples();
    assert!(inputs[..cfg.dmb.horizon].iter().all(|u| u.amax() == 0.0));
    assert!(inputs[cfg.dmb.horizon].amax() > 0.0);
}

#[test]
fn blocking_costs_more_than_receding_horizon() {
    let c = compare(&example(100)).unwrap();
    assert_eq!(c.receding.controller, ControllerKind::RhReduced);
    assert_eq!(c.dmb.controller, ControllerKind::Dmb);
    for k in MetricKind::ALL {
        let r = c.ratios[&k];
        assert!(r.ratio >= 1.0 - 1e-12, "{}: {}", k.name(), r.ratio);
    }
    assert!(c.dmb.trajectory.last_state().norm() < 1e-4);
}

#[test]
fn prefix_of_long_run_matches_short_run() {
    let long = run_dmb(&example(90)).unwrap();
    let short = run_dmb(&example(35)).unwrap();
    let cut = long.truncated(&example(90).problem, 35).unwrap();
    assert_eq!(trajectory_csv(&cut), trajectory_csv(&short));
    assert_eq!(cut.cycles, short.cycles);
}

#[test]
fn horizon_shorter_than_run_length_is_required() {
    let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap();
    assert!(cfg.with_steps(cfg.dmb.horizon - 1).is_err());
    assert!(cfg.with_steps(cfg.dmb.horizon).is_ok());
}

#[test]
fn admissibility_is_enforced() {
    assert!(DmbConfig::new(6, 3, 0).is_err());
    assert!(DmbConfig::new(6, 3, 4).is_err());
    assert!(DmbConfig::new(6, 5, 1).is_err());
    assert!(DmbConfig::new(6, 4, 4).is_ok());
}

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use dmb_mpc::bounds::{estimate_gamma, BoundReport};
use dmb_mpc::config::{config_table, parse_config, parse_config_str, EXAMPLE_CONFIG};
use dmb_mpc::objective::MetricKind;
use dmb_mpc::oracle::suite::run_suite;
use dmb_mpc::simulator::{
    compare, run_dmb, run_receding, summary_json, sweep, trajectory_csv, Comparison, ExperimentConfig, SimResult,
};
use dmb_mpc::{Result, Vector};

/// Reference pair the example sweep tries to match (receding, blocked).
const REFERENCE: (f64, f64) = (15.9134, 16.1334);
const MATCH_TOL: f64 = 0.02;
const RATIO_RANGE: (f64, f64) = (1.0, 1.05);

#[derive(Parser, Debug)]
#[command(name = "dmb-mpc", version, about = "Receding-horizon and dynamic move blocking MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults to the shipped example.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for CSV/JSON artifacts and the run manifest.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides `sim.metric`.
    #[arg(long, global = true, value_name = "NAME")]
    metric: Option<MetricKind>,

    /// Overrides `sim.T`.
    #[arg(long = "T", global = true, value_name = "INT")]
    steps: Option<usize>,

    /// Seed for randomized test instances; controllers are unaffected.
    #[arg(long, global = true, value_name = "INT", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Run one controller in closed loop.
    Simulate {
        #[arg(long, value_enum, default_value_t = Controller::Dmb)]
        controller: Controller,
    },
    /// Reduced-horizon receding MPC against the blocked controller.
    Compare,
    /// Suboptimality bound report for given γ, N and N_B.
    Bounds {
        #[arg(long)]
        gamma: f64,
        #[arg(long = "N")]
        horizon: usize,
        #[arg(long = "NB")]
        blocking: usize,
        #[arg(long = "NOP")]
        op_steps: Option<usize>,
        /// Blocked-prefix cost δ(x) for the overall bound.
        #[arg(long, requires = "v_inf")]
        delta: Option<f64>,
        /// Infinite-horizon value V_∞(x) for the overall bound.
        #[arg(long, requires = "delta")]
        v_inf: Option<f64>,
    },
    /// Estimate γ on a regular grid of states around the origin.
    Gamma {
        /// Horizon checked; defaults to N − N_B.
        #[arg(long)]
        horizon: Option<usize>,
        /// Grid points per state axis.
        #[arg(long, default_value_t = 5)]
        points: usize,
        /// Half-width of the grid; defaults to max |x0|.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Exhaustive oracle invariant suite on built-in instances.
    OracleCheck,
    /// Metric and length sweep on the shipped example.
    ReproduceExample,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Controller {
    Dmb,
    RhReduced,
    RhFull,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    arguments: Vec<String>,
    tool_version: &'static str,
    config_path: Option<String>,
    config: Value,
    outputs: Vec<String>,
}

struct Outputs {
    dir: Option<PathBuf>,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, contents)?;
            self.written.push(path.display().to_string());
        }
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli, path: Option<&Path>) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => parse_config(p)?,
        None => parse_config_str(EXAMPLE_CONFIG)?,
    };
    let mut cfg = match cli.steps {
        Some(t) => base.with_steps(t)?,
        None => base,
    };
    if let Some(m) = cli.metric {
        cfg.metric = m;
    }
    Ok(cfg)
}

fn config_echo(cfg: &ExperimentConfig) -> Result<Value> {
    Ok(serde_json::to_value(config_table(cfg))?)
}

/// Returns `Ok(false)` when the command ran but a checked property failed.
fn run(cli: &Cli) -> Result<bool> {
    let mut outputs = Outputs {
        dir: cli.out.clone(),
        written: Vec::new(),
    };
    let mut echo = Value::Null;
    let mut config_path = cli.config.as_ref().map(|p| p.display().to_string());

    let (report, ok) = match &cli.command {
        Command::Simulate { controller } => {
            let cfg = load_config(cli, cli.config.as_deref())?;
            echo = config_echo(&cfg)?;
            let result = match controller {
                Controller::Dmb => run_dmb(&cfg)?,
                Controller::RhReduced => run_receding(&cfg, cfg.dmb.reduced_horizon())?,
                Controller::RhFull => run_receding(&cfg, cfg.dmb.horizon)?,
            };
            let summary = run_summary(&result, &cfg, echo.clone());
            outputs.write("trajectory.csv", &trajectory_csv(&result))?;
            outputs.write_json("summary.json", &summary)?;
            (summary, true)
        }
        Command::Compare => {
            let cfg = load_config(cli, cli.config.as_deref())?;
            echo = config_echo(&cfg)?;
            let c = compare(&cfg)?;
            let report = comparison_json(&c, &cfg, echo.clone());
            outputs.write("rh_trajectory.csv", &trajectory_csv(&c.receding))?;
            outputs.write("dmb_trajectory.csv", &trajectory_csv(&c.dmb))?;
            outputs.write_json("comparison.json", &report)?;
            (report, true)
        }
        Command::Bounds {
            gamma,
            horizon,
            blocking,
            op_steps,
            delta,
            v_inf,
        } => {
            config_path = None;
            let report = BoundReport::new(
                *gamma,
                *horizon,
                *blocking,
                op_steps.unwrap_or(*blocking),
                delta.zip(*v_inf),
            )?;
            let value = serde_json::to_value(&report)?;
            outputs.write_json("bounds.json", &value)?;
            (value, true)
        }
        Command::Gamma {
            horizon,
            points,
            radius,
        } => {
            let cfg = load_config(cli, cli.config.as_deref())?;
            echo = config_echo(&cfg)?;
            let h = horizon.unwrap_or(cfg.dmb.reduced_horizon());
            let r = radius.unwrap_or_else(|| cfg.x0.amax());
            let samples = state_grid(cfg.problem.state_dim(), *points, r);
            let est = estimate_gamma(&cfg.problem, h, &samples)?;
            let value = serde_json::to_value(&est)?;
            outputs.write_json("gamma.json", &value)?;
            (value, true)
        }
        Command::OracleCheck => {
            config_path = None;
            let checks = run_suite(cli.seed)?;
            for c in &checks {
                eprintln!(
                    "{} {:<28} {:<30} cases={:<5} worst_margin={:e}{}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.instance,
                    c.check,
                    c.cases,
                    c.worst_margin,
                    if c.detail.is_empty() { String::new() } else { format!("  {}", c.detail) }
                );
            }
            let ok = checks.iter().all(|c| c.passed);
            let value = json!({ "seed": cli.seed, "passed": ok, "checks": checks });
            outputs.write_json("oracle_check.json", &value)?;
            (value, ok)
        }
        Command::ReproduceExample => {
            let cfg = load_config(cli, cli.config.as_deref())?;
            echo = config_echo(&cfg)?;
            let (value, ok) = reproduce(&cfg)?;
            outputs.write_json("reproduce_example.json", &value)?;
            (value, ok)
        }
    };

    if outputs.dir.is_some() {
        let manifest = RunManifest {
            command: command_name(&cli.command).into(),
            arguments: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_path,
            config: echo,
            outputs: {
                let mut all = outputs.written.clone();
                let dir = outputs.dir.clone().expect("checked above");
                all.push(dir.join("manifest.json").display().to_string());
                all
            },
        };
        let value = serde_json::to_value(&manifest)?;
        outputs.write_json("manifest.json", &value)?;
    }
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
        _ => {}
    }
    Ok(ok)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Compare => "compare",
        Command::Bounds { .. } => "bounds",
        Command::Gamma { .. } => "gamma",
        Command::OracleCheck => "oracle-check",
        Command::ReproduceExample => "reproduce-example",
    }
}

fn run_summary(result: &SimResult, cfg: &ExperimentConfig, echo: Value) -> Value {
    let mut summary = summary_json(result, echo);
    summary["metric"] = json!(cfg.metric);
    summary["metric_value"] = json!(result.metric(cfg.metric));
    summary
}

fn comparison_json(c: &Comparison, cfg: &ExperimentConfig, echo: Value) -> Value {
    let ratios: BTreeMap<&str, _> = c.ratios.iter().map(|(k, r)| (k.name(), *r)).collect();
    json!({
        "metric": cfg.metric,
        "mpc": run_summary(&c.receding, cfg, Value::Null),
        "dmb": run_summary(&c.dmb, cfg, Value::Null),
        "ratios": ratios,
        "state_error": c.state_error,
        "max_state_error": c.max_state_error(),
        "config": echo,
    })
}

fn reproduce(cfg: &ExperimentConfig) -> Result<(Value, bool)> {
    let report = sweep(cfg, 30..=150, REFERENCE, MATCH_TOL)?;
    let mut per_metric = BTreeMap::new();
    let mut ratios_ok = true;
    for k in MetricKind::ALL {
        let (lo, hi) = report
            .points
            .iter()
            .filter(|p| p.metric == k)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.ratio), hi.max(p.ratio)));
        ratios_ok &= lo >= RATIO_RANGE.0 && hi <= RATIO_RANGE.1;
        per_metric.insert(k.name(), json!({ "ratio_min": lo, "ratio_max": hi }));
    }
    let at_default = compare(cfg)?;
    let default_ratios: BTreeMap<&str, f64> =
        at_default.ratios.iter().map(|(k, r)| (k.name(), r.ratio)).collect();
    let b = report.best;
    eprintln!(
        "best match: {} at T={}: MPC {:.4} (ref {:.4}, {:+.2}%), DMB {:.4} (ref {:.4}, {:+.2}%), ratio {:.4}",
        b.metric,
        b.steps,
        b.mpc,
        REFERENCE.0,
        100.0 * (b.mpc / REFERENCE.0 - 1.0),
        b.dmb,
        REFERENCE.1,
        100.0 * (b.dmb / REFERENCE.1 - 1.0),
        b.ratio
    );
    let ok = report.matched && ratios_ok;
    let value = json!({
        "matched": report.matched,
        "ratios_within": [RATIO_RANGE.0, RATIO_RANGE.1],
        "ratios_ok": ratios_ok,
        "best": b,
        "ratio_range_by_metric": per_metric,
        "default_steps": cfg.steps,
        "ratios_at_default_steps": default_ratios,
        "sweep": report,
    });
    Ok((value, ok))
}

/// `points^n` states on `[−r, r]^n`.
fn state_grid(n: usize, points: usize, r: f64) -> Vec<Vector> {
    let axis: Vec<f64> = if points <= 1 {
        vec![r]
    } else {
        (0..points).map(|i| -r + 2.0 * r * i as f64 / (points - 1) as f64).collect()
    };
    let total = axis.len().pow(n as u32);
    (0..total)
        .map(|mut code| {
            Vector::from_fn(n, |_, _| {
                let v = axis[code % axis.len()];
                code /= axis.len();
                v
            })
        })
        .collect()
}

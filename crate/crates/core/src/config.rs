//! TOML experiment configuration.
//!
//! ```toml
//! [plant]
//! A = [[0.9, 0.0], [0.6, 0.4]]
//! B = [[0.1], [0.0]]
//! C = [[0.0, 1.0]]          # optional, identity by default
//!
//! [cost]
//! Q = [[10.0, 0.0], [0.0, 100.0]]
//! R = [[1.0]]               # a bare number is accepted for 1×1 matrices
//!
//! [constraints]
//! u_min = [-1.0]
//! u_max = [1.0]
//!
//! [horizon]
//! N = 6
//! N_B = 3
//! N_OP = 3
//!
//! [sim]
//! x0 = [1.0, -1.0]
//! T = 100                   # optional
//! metric = "sqrt_total_cost" # optional
//!
//! [dmb]
//! bootstrap = "full_solve"  # optional: full_solve | zeros
//!
//! [solver]                  # optional
//! tol = 1e-9
//! max_iter = 50000
//! ```

use std::path::Path;

use toml::{Table, Value};

use crate::dmb::{BootstrapKind, DmbConfig};
use crate::error::{Error, Result};
use crate::objective::{MetricKind, QuadraticStageCost};
use crate::ocp::{MpcProblem, SolverSettings};
use crate::plant::{InputBox, LinearPlant, StateMap};
use crate::simulator::ExperimentConfig;
use crate::{Matrix, Vector};

/// The shipped two-state example.
pub const EXAMPLE_CONFIG: &str = include_str!("../configs/two_state.toml");

pub const DEFAULT_STEPS: usize = 100;

const SCHEMA: &[(&str, &[&str])] = &[
    ("plant", &["A", "B", "C"]),
    ("cost", &["Q", "R"]),
    ("constraints", &["u_min", "u_max"]),
    ("horizon", &["N", "N_B", "N_OP"]),
    ("sim", &["x0", "T", "metric"]),
    ("dmb", &["bootstrap"]),
    ("solver", &["tol", "max_iter"]),
];

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<document>", e.to_string().trim_end()))?;
    check_known_keys(&doc)?;
    let r = Reader { doc: &doc };

    let a = r.matrix("plant.A")?;
    let b = r.matrix("plant.B")?;
    let c = match r.optional("plant.C") {
        Some(_) => r.matrix("plant.C")?,
        None => Matrix::identity(a.nrows(), a.nrows()),
    };
    let plant = LinearPlant::new(a, b, c).map_err(|e| keyed("plant", e))?;

    let q = r.matrix("cost.Q")?;
    let rr = r.matrix("cost.R")?;
    expect_shape("cost.Q", &q, plant.state_dim(), plant.state_dim())?;
    expect_shape("cost.R", &rr, plant.input_dim(), plant.input_dim())?;
    let cost = QuadraticStageCost::new(q, rr)?;

    let lower = r.vector("constraints.u_min")?;
    let upper = r.vector("constraints.u_max")?;
    expect_len("constraints.u_min", &lower, plant.input_dim())?;
    expect_len("constraints.u_max", &upper, plant.input_dim())?;
    let input_box = InputBox::new(lower, upper).map_err(|e| keyed("constraints", e))?;

    let defaults = SolverSettings::default();
    let settings = SolverSettings {
        tol: match r.optional("solver.tol") {
            Some(_) => r.float("solver.tol")?,
            None => defaults.tol,
        },
        max_iter: match r.optional("solver.max_iter") {
            Some(_) => r.count("solver.max_iter")?,
            None => defaults.max_iter,
        },
    };
    if !(settings.tol > 0.0) {
        return Err(Error::config("solver.tol", "must be positive"));
    }
    if settings.max_iter == 0 {
        return Err(Error::config("solver.max_iter", "must be at least 1"));
    }
    let problem = MpcProblem::new(plant, cost, input_box, settings)?;

    let horizon = r.count("horizon.N")?;
    let blocking = r.count("horizon.N_B")?;
    let op_steps = r.count("horizon.N_OP")?;
    let dmb = DmbConfig::new(horizon, blocking, op_steps).map_err(|e| {
        let key = if op_steps < 1 || op_steps > blocking {
            "horizon.N_OP"
        } else {
            "horizon.N_B"
        };
        keyed(key, e)
    })?;

    let x0 = r.vector("sim.x0")?;
    expect_len("sim.x0", &x0, problem.state_dim())?;
    let steps = match r.optional("sim.T") {
        Some(_) => r.count("sim.T")?,
        None => DEFAULT_STEPS,
    };
    let metric = match r.optional("sim.metric") {
        Some(_) => r.string("sim.metric")?.parse()?,
        None => MetricKind::SqrtTotalCost,
    };
    let bootstrap = match r.optional("dmb.bootstrap") {
        Some(_) => match r.string("dmb.bootstrap")? {
            "full_solve" => BootstrapKind::FullSolve,
            "zeros" => BootstrapKind::Zeros,
            other => {
                return Err(Error::config(
                    "dmb.bootstrap",
                    format!("unknown bootstrap `{other}` (expected full_solve or zeros)"),
                ))
            }
        },
        None => BootstrapKind::FullSolve,
    };

    ExperimentConfig::new(problem, dmb, x0, steps, metric, bootstrap)
}

/// Serializes `cfg` with every key present.
pub fn emit_config(cfg: &ExperimentConfig) -> String {
    config_table(cfg).to_string()
}

pub fn config_table(cfg: &ExperimentConfig) -> Table {
    let p = &cfg.problem;
    let mut doc = Table::new();
    let mut section = |name: &str, entries: Vec<(&str, Value)>| {
        doc.insert(
            name.into(),
            Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()),
        );
    };
    section(
        "plant",
        vec![
            ("A", matrix_value(p.plant.a())),
            ("B", matrix_value(p.plant.b())),
            ("C", matrix_value(p.plant.c())),
        ],
    );
    section("cost", vec![("Q", matrix_value(p.cost.q())), ("R", matrix_value(p.cost.r()))]);
    section(
        "constraints",
        vec![
            ("u_min", vector_value(p.input_box.lower())),
            ("u_max", vector_value(p.input_box.upper())),
        ],
    );
    section(
        "horizon",
        vec![
            ("N", int(cfg.dmb.horizon)),
            ("N_B", int(cfg.dmb.blocking)),
            ("N_OP", int(cfg.dmb.op_steps)),
        ],
    );
    section(
        "sim",
        vec![
            ("x0", vector_value(&cfg.x0)),
            ("T", int(cfg.steps)),
            ("metric", Value::String(cfg.metric.name().into())),
        ],
    );
    let bootstrap = match cfg.bootstrap {
        BootstrapKind::FullSolve => "full_solve",
        BootstrapKind::Zeros => "zeros",
    };
    section("dmb", vec![("bootstrap", Value::String(bootstrap.into()))]);
    section(
        "solver",
        vec![
            ("tol", Value::Float(p.settings.tol)),
            ("max_iter", int(p.settings.max_iter)),
        ],
    );
    doc
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn vector_value(v: &Vector) -> Value {
    Value::Array(v.iter().map(|&x| Value::Float(x)).collect())
}

fn matrix_value(m: &Matrix) -> Value {
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|&x| Value::Float(x)).collect()))
            .collect(),
    )
}

fn keyed(key: &str, err: Error) -> Error {
    match err {
        Error::Config { .. } => err,
        other => Error::config(key, other.to_string()),
    }
}

fn check_known_keys(doc: &Table) -> Result<()> {
    for (name, value) in doc {
        let Some((_, keys)) = SCHEMA.iter().find(|(s, _)| s == name) else {
            return Err(Error::config(name.as_str(), "unknown section"));
        };
        let Value::Table(t) = value else {
            return Err(Error::config(name.as_str(), "expected a table"));
        };
        for k in t.keys() {
            if !keys.contains(&k.as_str()) {
                return Err(Error::config(format!("{name}.{k}"), "unknown key"));
            }
        }
    }
    Ok(())
}

fn expect_shape(key: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::config(
            key,
            format!("expected {rows}×{cols}, got {}×{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn expect_len(key: &str, v: &Vector, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::config(key, format!("expected {len} entries, got {}", v.len())));
    }
    Ok(())
}

struct Reader<'a> {
    doc: &'a Table,
}

impl Reader<'_> {
    fn optional(&self, key: &str) -> Option<&Value> {
        let (section, name) = key.split_once('.').expect("keys are section.name");
        self.doc.get(section)?.as_table()?.get(name)
    }

    fn required(&self, key: &str) -> Result<&Value> {
        self.optional(key).ok_or_else(|| Error::config(key, "missing key"))
    }

    fn float(&self, key: &str) -> Result<f64> {
        number(key, self.required(key)?)
    }

    fn count(&self, key: &str) -> Result<usize> {
        match self.required(key)? {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            other => Err(Error::config(key, format!("expected a nonnegative integer, got {other}"))),
        }
    }

    fn string(&self, key: &str) -> Result<&str> {
        match self.required(key)? {
            Value::String(s) => Ok(s),
            other => Err(Error::config(key, format!("expected a string, got {other}"))),
        }
    }

    fn vector(&self, key: &str) -> Result<Vector> {
        match self.required(key)? {
            Value::Array(items) => {
                let xs = items.iter().map(|v| number(key, v)).collect::<Result<Vec<_>>>()?;
                Ok(Vector::from_vec(xs))
            }
            other => Err(Error::config(key, format!("expected an array of numbers, got {other}"))),
        }
    }

    fn matrix(&self, key: &str) -> Result<Matrix> {
        let rows = match self.required(key)? {
            Value::Array(rows) => rows,
            v @ (Value::Float(_) | Value::Integer(_)) => {
                return Ok(Matrix::from_element(1, 1, number(key, v)?));
            }
            other => return Err(Error::config(key, format!("expected an array of rows, got {other}"))),
        };
        let mut data = Vec::new();
        let mut width = None;
        for (i, row) in rows.iter().enumerate() {
            let Value::Array(entries) = row else {
                return Err(Error::config(key, format!("row {i} is not an array")));
            };
            if *width.get_or_insert(entries.len()) != entries.len() {
                return Err(Error::config(key, format!("row {i} has {} entries, expected {}", entries.len(), width.unwrap())));
            }
            for v in entries {
                data.push(number(key, v)?);
            }
        }
        let cols = width.unwrap_or(0);
        if rows.is_empty() || cols == 0 {
            return Err(Error::config(key, "matrix is empty"));
        }
        Ok(Matrix::from_row_slice(rows.len(), cols, &data))
    }
}

fn number(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::config(key, format!("expected a number, got {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config_key(err: Error) -> (String, String) {
        match err {
            Error::Config { key, msg } => (key, msg),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn shipped_example_parses() {
        let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap();
        assert_eq!(cfg.dmb, DmbConfig::new(6, 3, 3).unwrap());
        assert_eq!(cfg.x0, Vector::from_vec(vec![1.0, -1.0]));
        assert_eq!(cfg.problem.cost.q()[(1, 1)], 100.0);
        assert_eq!(cfg.problem.input_box.upper()[0], 1.0);
        assert_eq!(cfg.steps, 100);
        assert_eq!(cfg.bootstrap, BootstrapKind::FullSolve);
    }

    #[test]
    fn blocking_beyond_first_bound_is_rejected() {
        let text = EXAMPLE_CONFIG.replace("N_B = 3", "N_B = 5");
        let (key, msg) = config_key(parse_config_str(&text).unwrap_err());
        assert_eq!(key, "horizon.N_B");
        assert!(msg.contains("N_B ≤ N−2"), "{msg}");
    }

    #[test]
    fn op_steps_beyond_blocking_is_rejected() {
        let text = EXAMPLE_CONFIG.replace("N_OP = 3", "N_OP = 4");
        let (key, msg) = config_key(parse_config_str(&text).unwrap_err());
        assert_eq!(key, "horizon.N_OP");
        assert!(msg.contains("N_OP ≤ N_B"), "{msg}");
    }

    #[test]
    fn asymmetric_q_is_rejected() {
        let text = EXAMPLE_CONFIG.replace("[0.0, 100.0]", "[1.0, 100.0]");
        let (key, _) = config_key(parse_config_str(&text).unwrap_err());
        assert_eq!(key, "cost.Q");
    }

    #[test]
    fn missing_and_unknown_keys_name_their_path() {
        let text = EXAMPLE_CONFIG.replace("N_OP = 3", "");
        assert_eq!(config_key(parse_config_str(&text).unwrap_err()).0, "horizon.N_OP");
        let text = format!("{EXAMPLE_CONFIG}\n[extra]\nx = 1\n");
        assert_eq!(config_key(parse_config_str(&text).unwrap_err()).0, "extra");
        let text = EXAMPLE_CONFIG.replace("u_max = [1.0]", "u_max = [1.0, 2.0]");
        assert_eq!(config_key(parse_config_str(&text).unwrap_err()).0, "constraints.u_max");
        let text = EXAMPLE_CONFIG.replace("\"sqrt_total_cost\"", "\"rmse\"");
        assert_eq!(config_key(parse_config_str(&text).unwrap_err()).0, "sim.metric");
    }

    #[test]
    fn short_simulation_is_rejected() {
        let text = EXAMPLE_CONFIG.replace("T = 100", "T = 5");
        assert_eq!(config_key(parse_config_str(&text).unwrap_err()).0, "sim.T");
    }

    #[test]
    fn emitted_example_round_trips() {
        let cfg = parse_config_str(EXAMPLE_CONFIG).unwrap();
        assert_eq!(parse_config_str(&emit_config(&cfg)).unwrap(), cfg);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e3..1e3f64, any::<f64>().prop_filter("finite", |x| x.is_finite() && x.abs() < 1e150)]
    }

    proptest! {
        #[test]
        fn round_trip(
            a in proptest::collection::vec(finite(), 4),
            b in proptest::collection::vec(finite(), 2),
            q in proptest::collection::vec(0.0..1e3f64, 2),
            r in 1e-3..1e3f64,
            lo in -10.0..0.0f64,
            hi in 0.0..10.0f64,
            x0 in proptest::collection::vec(finite(), 2),
            n in 3usize..12,
            extra in 0usize..50,
            tol in 1e-12..1e-3f64,
            zeros in any::<bool>(),
            metric in 0usize..4,
        ) {
            let nb = 1 + (extra % (n - 2));
            let plant = LinearPlant::with_full_output(
                Matrix::from_row_slice(2, 2, &a),
                Matrix::from_row_slice(2, 1, &b),
            ).unwrap();
            let cost = QuadraticStageCost::new(
                Matrix::from_diagonal(&Vector::from_vec(q)),
                Matrix::from_element(1, 1, r),
            ).unwrap();
            let problem = MpcProblem::new(
                plant,
                cost,
                InputBox::uniform(1, lo, hi).unwrap(),
                SolverSettings { tol, max_iter: 10 + extra },
            ).unwrap();
            let cfg = ExperimentConfig::new(
                problem,
                DmbConfig::new(n, nb, 1 + extra % nb).unwrap(),
                Vector::from_vec(x0),
                n + extra,
                MetricKind::ALL[metric],
                if zeros { BootstrapKind::Zeros } else { BootstrapKind::FullSolve },
            ).unwrap();
            prop_assert_eq!(parse_config_str(&emit_config(&cfg)).unwrap(), cfg);
        }
    }
}

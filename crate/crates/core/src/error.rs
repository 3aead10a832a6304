use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("solver error: {0}")]
    Solver(String),

    /// A horizon or bound inequality that the scheme requires does not hold.
    #[error("admissibility error: {0}")]
    Admissibility(String),

    #[error("gamma estimation failed: {0}")]
    Estimation(String),

    #[error("oracle capacity exceeded: {needed:.3e} sequence evaluations > budget {budget:.0e}")]
    OracleCapacity { needed: f64, budget: f64 },

    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("simulation aborted at step {step}: {source}")]
    Simulation {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Simulation {
            step,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

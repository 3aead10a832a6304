//! Constrained model predictive control with dynamic move blocking.
//!
//! The crate provides a linear plant model, quadratic costs, a condensed
//! box-constrained QP solver for the finite-horizon problem, the dynamic
//! move blocking (DMB) controller, suboptimality bound calculators, an
//! exhaustive dynamic-programming oracle for tiny instances and a
//! closed-loop simulator with computation-delay bookkeeping.

pub mod bounds;
pub mod config;
pub mod dmb;
pub mod error;
pub mod objective;
pub mod ocp;
pub mod oracle;
pub mod plant;
pub mod simulator;

pub use error::{Error, Result};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

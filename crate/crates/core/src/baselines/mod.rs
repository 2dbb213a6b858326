//! Reference solutions: Riccati recursion for the LQ problem, backward
//! induction for execution, and a backward-DP lookup table for single-device
//! storage.

pub mod execution;
pub mod riccati;
pub mod storage;


use thiserror::Error;

use crate::control::ControlError;

pub use execution::{execution_optimal, relative_control_error, ExecutionOracle, QuadraticValue};
pub use riccati::{lq_riccati, LqSolution};
pub use storage::{energy_dp_lookup, table_policy_evaluate, DpOptions, TableActor, ValueTable};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{0}")]
    Invalid(String),
    #[error("quadratic continuation not positive definite at t = {t}")]
    NotConvex { t: usize },
    #[error("ansatz residual {residual:e} at t = {t} exceeds tolerance")]
    Residual { t: usize, residual: f64 },
    #[error("state off the table grid: {0}")]
    OffGrid(String),
    #[error("value table: {0}")]
    Table(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Control(#[from] ControlError),
}

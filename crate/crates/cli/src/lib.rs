//! Experiment harness: configuration loading, seeded training runs, oracle
//! baselines, reports and gradient checks.

pub mod artifacts;
pub mod commands;
pub mod config;

use deepctl::baselines::BaselineError;
use deepctl::control::ControlError;
use deepctl::envs::EnvError;
use deepctl::nets::NetError;
use thiserror::Error;

pub use commands::{cmd_baseline, cmd_gradcheck, cmd_report, cmd_train, GradCheckSummary, TrainSummary};
pub use config::{load, LoadedConfig, Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("environment mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Net(#[from] NetError),
}

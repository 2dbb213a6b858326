//! Benchmark environments: a linear-quadratic toy, optimal execution with
//! price impact, and single- and multi-device energy storage.

pub mod energy;
pub mod execution;
pub mod lq;
mod markov;

#[cfg(test)]
mod tests;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlProblem;
use crate::diffgraph::Tensor;

pub use energy::{
    Device, EnergyMultiDefinition, EnergyMultiModel, EnergySingleDefinition, EnergySingleModel, GeneratedDevices,
};
pub use execution::{CanonicalExecution, ExecutionDefinition, ExecutionModel};
pub use lq::{LqDefinition, LqProblem};
pub use markov::MarkovChain;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("{0}")]
    Invalid(String),
    #[error("storage level {level} outside [0, {capacity}]")]
    StorageBounds { level: f64, capacity: f64 },
}

/// Environment description as stored in definition files. Generated variants
/// are expanded to explicit parameters by [`EnvDefinition::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvDefinition {
    Lq(LqDefinition),
    Execution(ExecutionDefinition),
    ExecutionCanonical(CanonicalExecution),
    EnergySingle(EnergySingleDefinition),
    EnergySingleDefault { horizon: usize },
    EnergyMulti(EnergyMultiDefinition),
    EnergyMultiGenerated(GeneratedDevices),
}

impl EnvDefinition {
    /// Replaces generated variants by their explicit parameters.
    pub fn resolve(&self) -> Result<EnvDefinition, EnvError> {
        Ok(match self {
            EnvDefinition::ExecutionCanonical(c) => EnvDefinition::Execution(c.generate()?),
            EnvDefinition::EnergySingleDefault { horizon } => {
                EnvDefinition::EnergySingle(EnergySingleDefinition::default_with_horizon(*horizon))
            }
            EnvDefinition::EnergyMultiGenerated(g) => EnvDefinition::EnergyMulti(g.generate()?),
            other => other.clone(),
        })
    }

    pub fn build(&self) -> Result<Environment, EnvError> {
        Ok(match self.resolve()? {
            EnvDefinition::Lq(d) => Environment::Lq(LqProblem::new(d)?),
            EnvDefinition::Execution(d) => Environment::Execution(ExecutionModel::new(d)?),
            EnvDefinition::EnergySingle(d) => Environment::EnergySingle(EnergySingleModel::new(d)?),
            EnvDefinition::EnergyMulti(d) => Environment::EnergyMulti(EnergyMultiModel::new(d)?),
            _ => unreachable!("resolve expands generated variants"),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Environment {
    Lq(LqProblem),
    Execution(ExecutionModel),
    EnergySingle(EnergySingleModel),
    EnergyMulti(EnergyMultiModel),
}

impl Environment {
    pub fn problem(&self) -> &dyn ControlProblem {
        match self {
            Environment::Lq(p) => p,
            Environment::Execution(p) => p,
            Environment::EnergySingle(p) => p,
            Environment::EnergyMulti(p) => p,
        }
    }

    /// Explicit definition this environment was built from.
    pub fn definition(&self) -> EnvDefinition {
        match self {
            Environment::Lq(p) => EnvDefinition::Lq(p.def.clone()),
            Environment::Execution(p) => EnvDefinition::Execution(p.def.clone()),
            Environment::EnergySingle(p) => EnvDefinition::EnergySingle(p.def.clone()),
            Environment::EnergyMulti(p) => EnvDefinition::EnergyMulti(p.def.clone()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Environment::Lq(_) => "lq",
            Environment::Execution(_) => "execution",
            Environment::EnergySingle(_) => "energy_single",
            Environment::EnergyMulti(_) => "energy_multi",
        }
    }
}

pub(crate) fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, EnvError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(EnvError::Invalid(format!("{name}: rows must be non-empty and of equal length")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EnvError::Invalid(format!("{name}: entries must be finite")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub(crate) fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<(), EnvError> {
    if m.shape() != (n, n) {
        return Err(EnvError::Invalid(format!("{name} is {:?}, expected ({n}, {n})", m.shape())));
    }
    Ok(())
}

pub(crate) fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<(), EnvError> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(EnvError::Invalid(format!("{name} must be symmetric")));
    }
    let min = m.clone().symmetric_eigenvalues().min();
    if min < -1e-10 * scale {
        return Err(EnvError::Invalid(format!("{name} must be positive semidefinite (eigenvalue {min})")));
    }
    Ok(())
}

/// `L` with `L Lᵀ = m` for a symmetric positive semidefinite `m`.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub(crate) fn mat_tensor(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("non-empty matrix")
}

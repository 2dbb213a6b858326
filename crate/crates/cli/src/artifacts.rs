//! Files written by the commands. Every table is comma-separated with a
//! header row; reals use the shortest representation that reads back
//! exactly.
//!
//! ```text
//! <out>/aggregate.csv            mean and std over seeds per validation point
//! <out>/baseline.toml            oracle value (baseline command)
//! <out>/gains.json               Riccati or execution feedback
//! <out>/value_table.bin          storage lookup table
//! <out>/report.csv               per-seed comparison (report command)
//! <out>/gradcheck.toml           per-seed gradient checks
//! <out>/seed-<s>/config.toml     reloadable config snapshot
//! <out>/seed-<s>/environment.toml  explicit environment definition
//! <out>/seed-<s>/checkpoint.bin  trained parameters
//! <out>/seed-<s>/curve.csv       learning curve
//! <out>/seed-<s>/timing.csv      wall-clock seconds per curve point
//! <out>/seed-<s>/report.toml     test-set evaluation
//! ```

use std::path::Path;

use deepctl::control::LearningCurve;
use deepctl::envs::EnvDefinition;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CURVE_HEADER: [&str; 6] = [
    "iteration",
    "train_objective",
    "val_objective_penalized",
    "val_objective_projected",
    "max_violation",
    "mean_violation",
];

/// SHA-256 of the TOML form of an explicit definition.
pub fn fingerprint(definition: &EnvDefinition) -> Result<String, CliError> {
    let text = toml::to_string(definition).map_err(|e| CliError::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn seed_dir(out: &Path, seed: u64) -> std::path::PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn write_curve(path: &Path, curve: &LearningCurve) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for p in &curve.points {
        w.write_record([
            p.iteration.to_string(),
            p.train_objective.to_string(),
            p.val_objective_penalized.to_string(),
            p.val_objective_projected.to_string(),
            p.max_violation.to_string(),
            p.mean_violation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<[f64; 6]>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut row = [0.0; 6];
        for (i, v) in record.iter().enumerate().take(6) {
            row[i] = v.parse().map_err(|_| CliError::Artifact(format!("{}: bad number {v}", path.display())))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_timing(path: &Path, curve: &LearningCurve) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "wall_seconds"])?;
    for (p, s) in curve.points.iter().zip(&curve.wall_seconds) {
        w.write_record([p.iteration.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation across seeds of every curve column, at
/// the validation points all curves share.
pub fn write_aggregate(path: &Path, curves: &[&LearningCurve]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "seeds".to_string()];
    for name in &CURVE_HEADER[1..] {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header)?;
    let len = curves.iter().map(|c| c.points.len()).min().unwrap_or(0);
    for k in 0..len {
        let iteration = curves[0].points[k].iteration;
        if curves.iter().any(|c| c.points[k].iteration != iteration) {
            break;
        }
        let mut row = vec![iteration.to_string(), curves.len().to_string()];
        let columns: [fn(&deepctl::control::CurvePoint) -> f64; 5] = [
            |p| p.train_objective,
            |p| p.val_objective_penalized,
            |p| p.val_objective_projected,
            |p| p.max_violation,
            |p| p.mean_violation,
        ];
        for get in columns {
            let values: Vec<f64> = curves.iter().map(|c| get(&c.points[k])).collect();
            let (m, s) = mean_std(&values);
            row.push(m.to_string());
            row.push(s.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Test-set evaluation of one trained seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub kind: String,
    pub fingerprint: String,
    pub status: String,
    pub iterations: u64,
    pub samples: usize,
    pub mean: f64,
    pub std_error: f64,
    pub max_violation: f64,
    pub mean_violation: f64,
    pub projection_failures: usize,
    pub feasible: bool,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEvaluation {
    pub file: String,
    pub storage_points: usize,
    pub resolution: usize,
    pub root_value: f64,
    pub samples: usize,
    pub seed: u64,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub kind: String,
    pub fingerprint: String,
    /// `riccati`, `backward_induction`, `dp_lookup` or `none`.
    pub oracle: String,
    /// Expected cost or reward of the oracle, in natural units.
    pub value: Option<f64>,
    pub message: Option<String>,
    pub no_impact_cost: Option<f64>,
    pub ansatz_residual: Option<f64>,
    pub table: Option<TableEvaluation>,
}

pub const REPORT_HEADER: [&str; 13] = [
    "seed",
    "kind",
    "samples",
    "policy_mean",
    "policy_std_error",
    "benchmark",
    "benchmark_std_error",
    "relative",
    "control_error",
    "max_violation",
    "mean_violation",
    "projection_failures",
    "feasible",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub seed: u64,
    pub kind: String,
    pub samples: usize,
    pub policy_mean: f64,
    pub policy_std_error: f64,
    pub benchmark: Option<f64>,
    pub benchmark_std_error: Option<f64>,
    pub relative: Option<f64>,
    pub control_error: Option<f64>,
    pub max_violation: f64,
    pub mean_violation: f64,
    pub projection_failures: usize,
    pub feasible: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ReportRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.seed.to_string(),
            self.kind.clone(),
            self.samples.to_string(),
            self.policy_mean.to_string(),
            self.policy_std_error.to_string(),
            opt(self.benchmark),
            opt(self.benchmark_std_error),
            opt(self.relative),
            opt(self.control_error),
            self.max_violation.to_string(),
            self.mean_violation.to_string(),
            self.projection_failures.to_string(),
            self.feasible.to_string(),
        ]
    }
}

pub fn write_report(w: impl std::io::Write, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(REPORT_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Artifact(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

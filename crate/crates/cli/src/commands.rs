//! The four subcommands. Each takes a config path plus command-line
//! overrides, writes its artifacts under the resolved output directory and
//! returns a summary for the binary to print.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use deepctl::baselines::{
    energy_dp_lookup, execution_optimal, lq_riccati, relative_control_error, table_policy_evaluate, ValueTable,
};
use deepctl::control::{
    evaluate, gradient_check, relative_metric, rollout_batch, stream_rng, train, ControlError, GradCheckReport,
    LearningCurve, RolloutOptions, StackedPolicy, Stream, TrainingConfig,
};
use deepctl::envs::execution::execution_relative_cost;
use deepctl::envs::Environment;
use deepctl::nets::checkpoint::{read_checkpoint, write_checkpoint};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::artifacts::{
    fingerprint, read_toml, seed_dir, write_aggregate, write_curve, write_report, write_timing, write_toml,
    BaselineReport, ReportRow, RunReport, TableEvaluation,
};
use crate::config::{load, LoadedConfig, Overrides};
use crate::CliError;

/// Test states used for the execution control error.
pub const CONTROL_ERROR_SAMPLES: usize = 10_000;

pub const VALUE_TABLE_FILE: &str = "value_table.bin";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub reports: Vec<RunReport>,
}

impl TrainSummary {
    pub fn diverged(&self) -> Vec<u64> {
        self.reports.iter().filter(|r| r.status != "ok").map(|r| r.seed).collect()
    }
}

fn seed_training(config: &TrainingConfig, seed: u64) -> TrainingConfig {
    TrainingConfig { seed, ..config.clone() }
}

/// Writes the reloadable per-seed snapshot: the environment is the explicit
/// definition next to it and the seed list holds only this seed.
fn write_snapshot(loaded: &LoadedConfig, env: &Environment, dir: &Path, seed: u64) -> Result<(), CliError> {
    let mut snapshot = loaded.config.clone();
    snapshot.environment = PathBuf::from("environment.toml");
    snapshot.out = PathBuf::from(".");
    snapshot.seeds = vec![seed];
    snapshot.training.seed = seed;
    fs::write(dir.join("config.toml"), snapshot.to_toml()?)?;
    write_toml(&dir.join("environment.toml"), &env.definition())
}

/// One training run per seed, then the aggregate over seeds. Diverged runs
/// keep the curve up to the failure and are reported with status `diverged`.
pub fn cmd_train(config: &Path, overrides: &Overrides) -> Result<TrainSummary, CliError> {
    let loaded = load(config, overrides)?;
    let env = loaded.build()?;
    let problem = env.problem();
    let print = fingerprint(&env.definition())?;
    let out = loaded.out.clone();
    fs::create_dir_all(&out)?;

    let mut reports = Vec::new();
    let mut curves: Vec<LearningCurve> = Vec::new();
    for &seed in &loaded.config.seeds {
        let dir = seed_dir(&out, seed);
        fs::create_dir_all(&dir)?;
        write_snapshot(&loaded, &env, &dir, seed)?;
        let training = seed_training(&loaded.config.training, seed);
        let mut report = RunReport {
            seed,
            kind: env.kind().to_string(),
            fingerprint: print.clone(),
            status: "ok".into(),
            iterations: training.iterations,
            samples: loaded.config.evaluation_samples,
            mean: f64::NAN,
            std_error: f64::NAN,
            max_violation: f64::NAN,
            mean_violation: f64::NAN,
            projection_failures: 0,
            feasible: false,
            train_seconds: 0.0,
        };
        let curve = match train(problem, &training) {
            Ok(outcome) => {
                let ckpt = outcome.policy.to_checkpoint();
                write_checkpoint(BufWriter::new(File::create(dir.join("checkpoint.bin"))?), &ckpt)?;
                let eval = evaluate(problem, &outcome.policy, loaded.config.evaluation_samples, seed)?;
                report.mean = eval.mean;
                report.std_error = eval.std_error;
                report.max_violation = eval.max_violation;
                report.mean_violation = eval.mean_violation;
                report.projection_failures = eval.projection_failures;
                report.feasible = eval.feasible();
                outcome.curve
            }
            Err(ControlError::Diverged { iteration, curve }) => {
                report.status = format!("diverged at iteration {iteration}");
                *curve
            }
            Err(e) => return Err(e.into()),
        };
        report.train_seconds = curve.wall_seconds.last().copied().unwrap_or(0.0);
        write_curve(&dir.join("curve.csv"), &curve)?;
        write_timing(&dir.join("timing.csv"), &curve)?;
        write_toml(&dir.join("report.toml"), &report)?;
        curves.push(curve);
        reports.push(report);
    }
    let refs: Vec<&LearningCurve> = curves.iter().collect();
    write_aggregate(&out.join("aggregate.csv"), &refs)?;
    Ok(TrainSummary { out, reports })
}

#[derive(Serialize)]
struct Gains<'a> {
    kind: &'a str,
    /// Row-major feedback matrix per timestep.
    gains: Vec<Vec<Vec<f64>>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_gains(path: &Path, kind: &str, gains: &[DMatrix<f64>]) -> Result<(), CliError> {
    let body = Gains { kind, gains: gains.iter().map(rows).collect() };
    fs::write(path, serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

/// Solves the environment's oracle and writes `baseline.toml` plus the
/// feedback gains or value table. Multi-device storage has no oracle; its
/// report says so and the command still succeeds.
pub fn cmd_baseline(config: &Path, overrides: &Overrides) -> Result<BaselineReport, CliError> {
    let loaded = load(config, overrides)?;
    let env = loaded.build()?;
    let out = loaded.out.clone();
    fs::create_dir_all(&out)?;
    let mut report = BaselineReport {
        kind: env.kind().to_string(),
        fingerprint: fingerprint(&env.definition())?,
        oracle: "none".into(),
        value: None,
        message: None,
        no_impact_cost: None,
        ansatz_residual: None,
        table: None,
    };
    match &env {
        Environment::Lq(p) => {
            let sol = lq_riccati(p)?;
            // a_t = −K_t s_t
            let neg: Vec<_> = sol.gains.iter().map(|k| -k).collect();
            write_gains(&out.join("gains.json"), "lq", &neg)?;
            report.oracle = "riccati".into();
            report.value = Some(sol.cost);
        }
        Environment::Execution(m) => {
            let oracle = execution_optimal(m)?;
            write_gains(&out.join("gains.json"), "execution", &oracle.quadratic.gains)?;
            report.oracle = "backward_induction".into();
            report.value = Some(oracle.cost);
            report.no_impact_cost = Some(oracle.no_impact_cost);
            report.ansatz_residual = Some(oracle.residual);
        }
        Environment::EnergySingle(m) => {
            let options = loaded.config.baseline.dp_options();
            let table = energy_dp_lookup(m, &options)?;
            table.write(BufWriter::new(File::create(out.join(VALUE_TABLE_FILE))?))?;
            let seed = loaded.config.seeds[0];
            let eval = table_policy_evaluate(&table, m, loaded.config.evaluation_samples, seed)?;
            report.oracle = "dp_lookup".into();
            report.value = Some(eval.mean);
            report.table = Some(TableEvaluation {
                file: VALUE_TABLE_FILE.into(),
                storage_points: options.storage_points,
                resolution: options.resolution,
                root_value: table.root_value(),
                samples: eval.samples,
                seed,
                mean: eval.mean,
                std_error: eval.std_error,
            });
        }
        Environment::EnergyMulti(_) => {
            report.message = Some("no oracle: no reference solution exists for multi-device storage".into());
        }
    }
    write_toml(&out.join("baseline.toml"), &report)?;
    Ok(report)
}

fn load_policy(dir: &Path, env: &Environment) -> Result<StackedPolicy, CliError> {
    let path = dir.join("checkpoint.bin");
    let file = File::open(&path).map_err(|e| CliError::Artifact(format!("cannot open {}: {e}", path.display())))?;
    let policy = StackedPolicy::from_checkpoint(read_checkpoint(BufReader::new(file))?)?;
    policy.check_against(env.problem())?;
    Ok(policy)
}

/// Re-evaluates every seed's checkpoint on the test stream of its seed and
/// compares it with the baseline written by [`cmd_baseline`]. The storage
/// lookup table is evaluated on the same noise as each policy.
pub fn cmd_report(config: &Path, overrides: &Overrides) -> Result<Vec<ReportRow>, CliError> {
    let loaded = load(config, overrides)?;
    let env = loaded.build()?;
    let problem = env.problem();
    let print = fingerprint(&env.definition())?;
    let out = loaded.out.clone();
    let baseline: BaselineReport = read_toml(&out.join("baseline.toml"))?;
    if baseline.fingerprint != print {
        return Err(CliError::Mismatch(format!(
            "baseline in {} was computed for a different environment",
            out.display()
        )));
    }
    let table = match &env {
        Environment::EnergySingle(m) => {
            let file = baseline.table.as_ref().map(|t| t.file.clone()).unwrap_or_else(|| VALUE_TABLE_FILE.into());
            let path = out.join(file);
            let f = File::open(&path).map_err(|e| CliError::Artifact(format!("cannot open {}: {e}", path.display())))?;
            let table = ValueTable::read(BufReader::new(f))?;
            table.check_against(m)?;
            Some(table)
        }
        _ => None,
    };
    let oracle = match &env {
        Environment::Execution(m) => Some(execution_optimal(m)?),
        _ => None,
    };
    let samples = loaded.config.evaluation_samples;
    let mut rows = Vec::new();
    for &seed in &loaded.config.seeds {
        let dir = seed_dir(&out, seed);
        let run: RunReport = read_toml(&dir.join("report.toml"))?;
        if run.fingerprint != print {
            return Err(CliError::Mismatch(format!("run {} was trained on a different environment", dir.display())));
        }
        let policy = load_policy(&dir, &env)?;
        let eval = evaluate(problem, &policy, samples, seed)?;
        let mut row = ReportRow {
            seed,
            kind: env.kind().to_string(),
            samples,
            policy_mean: eval.mean,
            policy_std_error: eval.std_error,
            benchmark: baseline.value,
            benchmark_std_error: None,
            relative: None,
            control_error: None,
            max_violation: eval.max_violation,
            mean_violation: eval.mean_violation,
            projection_failures: eval.projection_failures,
            feasible: eval.feasible(),
        };
        match &env {
            Environment::Lq(_) => {
                let benchmark = baseline.value.ok_or_else(|| CliError::Artifact("baseline has no value".into()))?;
                row.relative = Some(relative_metric(eval.mean, benchmark, problem.sense())?);
            }
            Environment::Execution(m) => {
                let oracle = oracle.as_ref().expect("built for execution");
                let benchmark = baseline.value.ok_or_else(|| CliError::Artifact("baseline has no value".into()))?;
                row.relative = Some(execution_relative_cost(m, eval.mean, benchmark)?);
                let noise = problem.sample_noise(&mut stream_rng(seed, Stream::Test), samples.min(CONTROL_ERROR_SAMPLES));
                let graph = rollout_batch(problem, &policy, &noise, RolloutOptions::eval_projected())?;
                row.control_error = Some(relative_control_error(oracle, &graph.result));
            }
            Environment::EnergySingle(m) => {
                let table = table.as_ref().expect("read for single storage");
                let bench = table_policy_evaluate(table, m, samples, seed)?;
                row.benchmark = Some(bench.mean);
                row.benchmark_std_error = Some(bench.std_error);
                row.relative = Some(relative_metric(eval.mean, bench.mean, problem.sense())?);
            }
            Environment::EnergyMulti(_) => {}
        }
        rows.push(row);
    }
    write_report(BufWriter::new(File::create(out.join("report.csv"))?), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct GradCheckSummary {
    pub out: PathBuf,
    pub results: Vec<(u64, GradCheckReport)>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|(_, r)| r.passed)
    }
}

#[derive(Serialize)]
struct GradCheckRecord {
    seed: u64,
    passed: bool,
    relative_error: f64,
    param_count: usize,
    resamples: usize,
    kink_margin: f64,
    worst_tensor: Option<String>,
    worst_timestep: Option<usize>,
    worst_relative_error: Option<f64>,
}

#[derive(Serialize)]
struct GradCheckFile {
    tolerance: f64,
    checks: Vec<GradCheckRecord>,
}

/// End-to-end finite-difference check of the stacked network for every seed.
pub fn cmd_gradcheck(config: &Path, overrides: &Overrides) -> Result<GradCheckSummary, CliError> {
    let loaded = load(config, overrides)?;
    let env = loaded.build()?;
    let options = loaded.config.gradcheck.options();
    let training = &loaded.config.training;
    let out = loaded.out.clone();
    fs::create_dir_all(&out)?;
    let mut results = Vec::new();
    for &seed in &loaded.config.seeds {
        let report = gradient_check(env.problem(), &training.hidden, training.use_batchnorm, seed, &options)?;
        results.push((seed, report));
    }
    let file = GradCheckFile {
        tolerance: options.tolerance,
        checks: results
            .iter()
            .map(|(seed, r)| GradCheckRecord {
                seed: *seed,
                passed: r.passed,
                relative_error: r.relative_error,
                param_count: r.param_count,
                resamples: r.resamples,
                kink_margin: r.kink_margin,
                worst_tensor: r.worst.as_ref().map(|w| w.name.clone()),
                worst_timestep: r.worst.as_ref().map(|w| w.timestep),
                worst_relative_error: r.worst.as_ref().map(|w| w.relative_error),
            })
            .collect(),
    };
    write_toml(&out.join("gradcheck.toml"), &file)?;
    Ok(GradCheckSummary { out, results })
}

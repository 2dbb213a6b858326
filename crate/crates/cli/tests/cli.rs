use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use deepctl_cli::artifacts::{read_curve, read_toml, seed_dir, RunReport};
use deepctl_cli::config::read_definition;
use deepctl_cli::{cmd_baseline, cmd_gradcheck, cmd_report, cmd_train, load, CliError, Overrides};

const LQ_ENV: &str = r#"
kind = "lq"
horizon = 3
f = [[1.0, 0.2], [-0.1, 1.0]]
g = [[1.0, 0.0], [0.2, 1.0]]
q = [[1.0, 0.0], [0.0, 1.0]]
r = [[0.5, 0.0], [0.0, 0.5]]
q_terminal = [[1.0, 0.0], [0.0, 1.0]]
noise_cov = [[0.05, 0.0], [0.0, 0.05]]
initial_state = [1.0, -1.0]
"#;

fn run_config(env_file: &str, seeds: &str, iterations: u64, extra: &str) -> String {
    format!(
        r#"
environment = "{env_file}"
out = "out"
seeds = [{seeds}]
evaluation_samples = 500

[training]
batch_size = 16
iterations = {iterations}
learning_rate = [[0, 1e-2]]
validation_batch_size = 128
validation_every = 10
hidden = [8]
{extra}
"#
    )
}

fn setup(dir: &Path, env: &str, config: &str) -> PathBuf {
    fs::write(dir.join("env.toml"), env).unwrap();
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    path
}

fn none() -> Overrides {
    Overrides::default()
}

#[test]
fn identical_configs_give_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "3", 25, ""));
    let first = cmd_train(&config, &Overrides { out: Some(dir.path().join("a")), ..none() }).unwrap();
    let second = cmd_train(&config, &Overrides { out: Some(dir.path().join("b")), ..none() }).unwrap();
    let a = fs::read(seed_dir(&first.out, 3).join("curve.csv")).unwrap();
    let b = fs::read(seed_dir(&second.out, 3).join("curve.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let ca = fs::read(seed_dir(&first.out, 3).join("checkpoint.bin")).unwrap();
    let cb = fs::read(seed_dir(&second.out, 3).join("checkpoint.bin")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn energy_curves_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let env = "kind = \"energy_single_default\"\nhorizon = 3\n";
    let config = setup(dir.path(), env, &run_config("env.toml", "1", 20, ""));
    let a = cmd_train(&config, &Overrides { out: Some(dir.path().join("a")), ..none() }).unwrap();
    let b = cmd_train(&config, &Overrides { out: Some(dir.path().join("b")), ..none() }).unwrap();
    assert_eq!(
        fs::read(seed_dir(&a.out, 1).join("curve.csv")).unwrap(),
        fs::read(seed_dir(&b.out, 1).join("curve.csv")).unwrap()
    );
}

#[test]
fn train_writes_per_seed_curves_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0, 1, 2", 20, ""));
    let summary = cmd_train(&config, &none()).unwrap();
    assert_eq!(summary.out, dir.path().join("out"));
    assert!(summary.diverged().is_empty());
    for seed in 0..3 {
        let rows = read_curve(&seed_dir(&summary.out, seed).join("curve.csv")).unwrap();
        let iterations: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        assert_eq!(iterations, vec![0.0, 10.0, 20.0]);
        assert!(seed_dir(&summary.out, seed).join("timing.csv").is_file());
    }
    let aggregate = fs::read_to_string(summary.out.join("aggregate.csv")).unwrap();
    let lines: Vec<&str> = aggregate.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("iteration,seeds,train_objective_mean,train_objective_std"));
    assert!(lines[1].starts_with("0,3,"));

    // the mean column matches the per-seed curves
    let mean: f64 = lines[3].split(',').nth(6).unwrap().parse().unwrap();
    let expected: f64 = (0..3)
        .map(|s| read_curve(&seed_dir(&summary.out, s).join("curve.csv")).unwrap()[2][3])
        .sum::<f64>()
        / 3.0;
    assert!((mean - expected).abs() <= 1e-12 * expected.abs());
}

#[test]
fn snapshot_reloads_to_equivalent_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(
        dir.path(),
        LQ_ENV,
        &run_config("env.toml", "5, 6", 10, "[training.penalties]\nequality = 3.0\n[gradcheck]\nbatch = 3\n"),
    );
    let original = load(&config, &none()).unwrap();
    let summary = cmd_train(&config, &none()).unwrap();
    let snapshot = load(&seed_dir(&summary.out, 6).join("config.toml"), &none()).unwrap();
    let mut expected = original.config.clone();
    expected.environment = PathBuf::from("environment.toml");
    expected.out = PathBuf::from(".");
    expected.seeds = vec![6];
    expected.training.seed = 6;
    assert_eq!(snapshot.config, expected);
    assert_eq!(snapshot.out, seed_dir(&summary.out, 6));
    assert_eq!(snapshot.build().unwrap().definition(), original.build().unwrap().definition());
}

#[test]
fn zero_iterations_record_only_the_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0", 0, ""));
    let summary = cmd_train(&config, &none()).unwrap();
    let seed = seed_dir(&summary.out, 0);
    let rows = read_curve(&seed.join("curve.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], 0.0);
    assert!(seed.join("checkpoint.bin").is_file());
    let report: RunReport = read_toml(&seed.join("report.toml")).unwrap();
    assert_eq!(report.iterations, 0);
    assert_eq!(report.status, "ok");
}

#[test]
fn missing_environment_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("nowhere.toml", "0", 5, ""));
    let err = cmd_train(&config, &none()).unwrap_err();
    let text = err.to_string();
    assert!(matches!(err, CliError::Config(_)));
    assert!(text.contains("environment"), "{text}");
    assert!(text.contains("nowhere.toml"), "{text}");
}

#[test]
fn invalid_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "1, 1", 5, ""));
    assert!(cmd_train(&config, &none()).unwrap_err().to_string().contains("seeds"));
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "", 5, ""));
    assert!(cmd_train(&config, &none()).unwrap_err().to_string().contains("seeds"));
    let bad = run_config("env.toml", "0", 5, "").replace("batch_size = 16", "batch_size = 0");
    let config = setup(dir.path(), LQ_ENV, &bad);
    assert!(cmd_train(&config, &none()).unwrap_err().to_string().contains("batch_size"));
    let typo = run_config("env.toml", "0", 5, "").replace("evaluation_samples", "evaluation_sample");
    let config = setup(dir.path(), LQ_ENV, &typo);
    assert!(cmd_train(&config, &none()).unwrap_err().to_string().contains("evaluation_sample"));
}

#[test]
fn overrides_replace_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0", 5, ""));
    let loaded = load(&config, &Overrides { seeds: Some(vec![7, 8]), samples: Some(9), out: None }).unwrap();
    assert_eq!(loaded.config.seeds, vec![7, 8]);
    assert_eq!(loaded.config.evaluation_samples, 9);
    assert_eq!(loaded.out, dir.path().join("out"));
}

#[test]
fn lq_baseline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0, 1", 40, ""));
    cmd_train(&config, &none()).unwrap();
    let baseline = cmd_baseline(&config, &none()).unwrap();
    assert_eq!(baseline.oracle, "riccati");
    let cost = baseline.value.unwrap();
    assert!(dir.path().join("out/gains.json").is_file());
    let gains: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/gains.json")).unwrap()).unwrap();
    assert_eq!(gains["gains"].as_array().unwrap().len(), 3);

    let rows = cmd_report(&config, &none()).unwrap();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row.benchmark, Some(cost));
        assert_eq!(row.relative, Some(row.policy_mean / cost));
        assert!(row.relative.unwrap() >= 0.95);
        assert!(row.feasible);
    }
    let table = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("seed,kind,samples,policy_mean"));
}

#[test]
fn report_rejects_a_baseline_for_another_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0", 5, ""));
    cmd_train(&config, &none()).unwrap();
    fs::write(dir.path().join("env.toml"), LQ_ENV.replace("horizon = 3", "horizon = 4")).unwrap();
    cmd_baseline(&config, &none()).unwrap();
    fs::write(dir.path().join("env.toml"), LQ_ENV).unwrap();
    let err = cmd_report(&config, &none()).unwrap_err();
    assert!(matches!(err, CliError::Mismatch(_)), "{err}");
}

#[test]
fn report_rejects_runs_for_another_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0", 5, ""));
    cmd_train(&config, &none()).unwrap();
    fs::write(dir.path().join("env.toml"), LQ_ENV.replace("0.05, 0.0]", "0.06, 0.0]")).unwrap();
    cmd_baseline(&config, &none()).unwrap();
    let err = cmd_report(&config, &none()).unwrap_err();
    assert!(matches!(err, CliError::Mismatch(_)), "{err}");
}

#[test]
fn multi_device_baseline_reports_no_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let env = "kind = \"energy_multi_generated\"\ndevices = 2\nhorizon = 3\n";
    let config = setup(dir.path(), env, &run_config("env.toml", "0", 10, ""));
    let baseline = cmd_baseline(&config, &none()).unwrap();
    assert_eq!(baseline.oracle, "none");
    assert!(baseline.value.is_none());
    assert!(baseline.message.unwrap().contains("no oracle"));
    cmd_train(&config, &none()).unwrap();
    let rows = cmd_report(&config, &none()).unwrap();
    assert_eq!(rows[0].relative, None);
    assert!(rows[0].feasible);
}

#[test]
fn storage_baseline_writes_a_table_and_reports_relative_reward() {
    let dir = tempfile::tempdir().unwrap();
    let env = "kind = \"energy_single_default\"\nhorizon = 2\n";
    let extra = "[baseline]\nstorage_points = 11\nresolution = 5\n";
    let config = setup(dir.path(), env, &run_config("env.toml", "0", 10, extra));
    let baseline = cmd_baseline(&config, &none()).unwrap();
    assert_eq!(baseline.oracle, "dp_lookup");
    let table = baseline.table.unwrap();
    assert_eq!((table.storage_points, table.resolution), (11, 5));
    assert!(dir.path().join("out/value_table.bin").is_file());
    // reread from disk
    let again: deepctl_cli::artifacts::BaselineReport = read_toml(&dir.path().join("out/baseline.toml")).unwrap();
    assert_eq!(again.table.unwrap().root_value, table.root_value);

    cmd_train(&config, &none()).unwrap();
    let rows = cmd_report(&config, &none()).unwrap();
    let row = &rows[0];
    let benchmark = row.benchmark.unwrap();
    assert_eq!(row.relative, Some(row.policy_mean / benchmark));
    assert!(row.benchmark_std_error.unwrap() > 0.0);
    assert!(row.max_violation <= 1e-9);
}

#[test]
fn execution_report_has_control_error() {
    let dir = tempfile::tempdir().unwrap();
    let env = "kind = \"execution_canonical\"\nhorizon = 3\nstocks = 3\nfactors = 2\n";
    let config = setup(dir.path(), env, &run_config("env.toml", "0", 10, ""));
    let baseline = cmd_baseline(&config, &none()).unwrap();
    assert_eq!(baseline.oracle, "backward_induction");
    assert!(baseline.ansatz_residual.unwrap() <= 1e-8);
    cmd_train(&config, &none()).unwrap();
    let rows = cmd_report(&config, &none()).unwrap();
    let row = &rows[0];
    let excess = baseline.value.unwrap() - baseline.no_impact_cost.unwrap();
    let expected = (row.policy_mean - baseline.no_impact_cost.unwrap()) / excess;
    assert!((row.relative.unwrap() - expected).abs() <= 1e-9 * expected.abs());
    assert!(row.control_error.unwrap() > 0.0);
}

#[test]
fn gradcheck_passes_on_a_small_lq_instance() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0, 1", 5, ""));
    let summary = cmd_gradcheck(&config, &none()).unwrap();
    assert!(summary.passed());
    for (_, r) in &summary.results {
        assert!(r.relative_error < 1e-4);
    }
    assert!(summary.out.join("gradcheck.toml").is_file());
}

#[test]
fn environment_snapshot_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let env = "kind = \"execution_canonical\"\nhorizon = 2\nstocks = 2\nfactors = 1\n";
    let config = setup(dir.path(), env, &run_config("env.toml", "0", 0, ""));
    let summary = cmd_train(&config, &none()).unwrap();
    let text = fs::read_to_string(seed_dir(&summary.out, 0).join("environment.toml")).unwrap();
    assert!(text.contains("kind = \"execution\""), "{text}");
    let def = read_definition(&seed_dir(&summary.out, 0).join("environment.toml")).unwrap();
    assert_eq!(def, load(&config, &none()).unwrap().build().unwrap().definition());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_deepctl");
    let config = setup(dir.path(), LQ_ENV, &run_config("missing.toml", "0", 5, ""));
    let out = Command::new(bin).arg("train").arg("--config").arg(&config).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.toml"), "{stderr}");

    let config = setup(dir.path(), LQ_ENV, &run_config("env.toml", "0", 5, ""));
    let out = Command::new(bin)
        .args(["baseline", "--seeds", "4,5", "--samples", "100", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("cli-out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cli-out/baseline.toml").is_file());
}

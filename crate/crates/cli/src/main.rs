use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepctl_cli::{cmd_baseline, cmd_gradcheck, cmd_report, cmd_train, CliError, Overrides};

/// Stacked-network stochastic control: training runs, oracle baselines,
/// reports and gradient checks.
#[derive(Parser)]
#[command(name = "deepctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per seed and write learning curves.
    Train(Common),
    /// Solve the environment's oracle.
    Baseline(Common),
    /// Compare trained policies with the baseline on test samples.
    Report(Common),
    /// Check backward gradients against finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Evaluation samples, overriding the config.
    #[arg(long)]
    samples: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { out: self.out.clone(), seeds: self.seeds.clone(), samples: self.samples }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train(c) => {
            let summary = cmd_train(&c.config, &c.overrides())?;
            for r in &summary.reports {
                println!(
                    "seed {}: {} mean {:.6} se {:.6} max_violation {:.3e} ({:.1}s)",
                    r.seed, r.status, r.mean, r.std_error, r.max_violation, r.train_seconds
                );
            }
            println!("artifacts in {}", summary.out.display());
            let diverged = summary.diverged();
            if !diverged.is_empty() {
                eprintln!("error: training diverged for seeds {diverged:?}");
            }
            Ok(diverged.is_empty())
        }
        Command::Baseline(c) => {
            let report = cmd_baseline(&c.config, &c.overrides())?;
            match (&report.value, &report.message) {
                (Some(v), _) => println!("{} oracle ({}): {v:.6}", report.kind, report.oracle),
                (None, Some(m)) => println!("{}: {m}", report.kind),
                (None, None) => println!("{}: no value", report.kind),
            }
            Ok(true)
        }
        Command::Report(c) => {
            let rows = cmd_report(&c.config, &c.overrides())?;
            for r in &rows {
                println!(
                    "seed {}: policy {:.6} benchmark {} relative {} control_error {} feasible {}",
                    r.seed,
                    r.policy_mean,
                    opt(r.benchmark),
                    opt(r.relative),
                    opt(r.control_error),
                    r.feasible
                );
            }
            Ok(true)
        }
        Command::Gradcheck(c) => {
            let summary = cmd_gradcheck(&c.config, &c.overrides())?;
            for (seed, r) in &summary.results {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                print!("seed {seed}: {verdict} relative error {:.3e} over {} parameters", r.relative_error, r.param_count);
                if let (false, Some(w)) = (r.passed, &r.worst) {
                    print!("; worst tensor {} at timestep {} (relative error {:.3e})", w.name, w.timestep, w.relative_error);
                }
                println!();
            }
            Ok(summary.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

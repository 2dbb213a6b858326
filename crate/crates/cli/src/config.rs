//! Run configuration files.
//!
//! ```toml
//! environment = "lq_env.toml"   # definition file, relative to this file
//! out = "runs/lq"               # relative to this file
//! seeds = [0, 1, 2, 3, 4]
//! evaluation_samples = 100000
//!
//! [training]
//! batch_size = 64
//! iterations = 3000
//! learning_rate = [[0, 1e-2], [1500, 1e-3]]
//! validation_every = 500
//! hidden = [16, 16]
//!
//! [training.penalties]          # optional overrides
//! equality = 100.0
//!
//! [baseline]                    # optional, storage lookup table
//! storage_points = 51
//! resolution = 11
//!
//! [gradcheck]                   # optional
//! batch = 4
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use deepctl::baselines::DpOptions;
use deepctl::control::{GradCheckOptions, TrainingConfig};
use deepctl::envs::{EnvDefinition, Environment};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub environment: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_samples")]
    pub evaluation_samples: usize,
    pub training: TrainingConfig,
    #[serde(default)]
    pub baseline: BaselineSettings,
    #[serde(default)]
    pub gradcheck: GradCheckSettings,
}

fn default_samples() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSettings {
    pub storage_points: usize,
    pub resolution: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        let d = DpOptions::default();
        BaselineSettings { storage_points: d.storage_points, resolution: d.resolution }
    }
}

impl BaselineSettings {
    pub fn dp_options(&self) -> DpOptions {
        DpOptions { storage_points: self.storage_points, resolution: self.resolution }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub kink_margin: f64,
    pub max_resamples: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let d = GradCheckOptions::default();
        GradCheckSettings {
            batch: d.batch,
            step: d.step,
            tolerance: d.tolerance,
            kink_margin: d.kink_margin,
            max_resamples: d.max_resamples,
        }
    }
}

impl GradCheckSettings {
    pub fn options(&self) -> GradCheckOptions {
        GradCheckOptions {
            batch: self.batch,
            step: self.step,
            tolerance: self.tolerance,
            kink_margin: self.kink_margin,
            max_resamples: self.max_resamples,
        }
    }
}

/// Command-line overrides of config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub samples: Option<usize>,
}

/// A validated config with paths resolved against its file.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub environment_path: PathBuf,
    pub out: PathBuf,
    pub definition: EnvDefinition,
}

fn field(name: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {message}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(field("seeds", "seeds must be distinct"));
        }
        if self.evaluation_samples == 0 {
            return Err(field("evaluation_samples", "must be positive"));
        }
        if self.baseline.storage_points < 2 {
            return Err(field("baseline.storage_points", "must be at least 2"));
        }
        if !(2..=256).contains(&self.baseline.resolution) {
            return Err(field("baseline.resolution", "must lie in [2, 256]"));
        }
        if self.gradcheck.batch == 0 || !(self.gradcheck.step > 0.0) {
            return Err(field("gradcheck", "batch and step must be positive"));
        }
        self.training.validate().map_err(|e| field("training", e))
    }
}

pub fn read_definition(path: &Path) -> Result<EnvDefinition, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| field("environment", format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| field("environment", format!("{}: {e}", path.display())))
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(out) = &overrides.out {
        config.out = out.clone();
    }
    if let Some(seeds) = &overrides.seeds {
        config.seeds = seeds.clone();
    }
    if let Some(samples) = overrides.samples {
        config.evaluation_samples = samples;
    }
    config.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let environment_path = base.join(&config.environment);
    if !environment_path.is_file() {
        return Err(field("environment", format!("file not found: {}", environment_path.display())));
    }
    let definition = read_definition(&environment_path)?;
    let out = if overrides.out.is_some() { config.out.clone() } else { base.join(&config.out) };
    Ok(LoadedConfig { config, environment_path, out, definition })
}

impl LoadedConfig {
    pub fn build(&self) -> Result<Environment, CliError> {
        self.definition.build().map_err(|e| field("environment", e))
    }
}

use std::path::{Path, PathBuf};

use mmpp::density::DensityFamily;
use mmpp::replan::ReplanConfig;
use mmpp::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub family: DensityFamily,
    /// Defaults to the number of demo classes.
    pub components: Option<usize>,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            family: DensityFamily::Gmm,
            components: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: mmpp::env::DEFAULT_SAMPLES,
            seeds: mmpp::env::DEFAULT_SEEDS,
        }
    }
}

/// Everything a run can be configured with; command-line flags win.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: Option<String>,
    pub demos: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model_kind: Option<String>,
    pub train: TrainConfig,
    pub density: DensityConfig,
    pub replan: ReplanConfig,
    pub eval: EvalConfig,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        cfg.train.validate()?;
        cfg.replan.validate()?;
        Ok(cfg)
    }
}

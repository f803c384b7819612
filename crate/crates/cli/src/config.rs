use std::path::Path;

use serde::{Deserialize, Serialize};
use umnmt::corpus::SynthConfig;
use umnmt::eval::EvalModality;
use umnmt::model::ModelConfig;
use umnmt::training::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable that replaces every seed of a run config.
pub const SEED_ENV: &str = "UMNMT_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modality: EvalModality,
    /// Split scored into `report.json` after training.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modality: EvalModality::WithImage,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.apply_seed_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed_env(&mut self) -> CliResult<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "{SEED_ENV} must be an unsigned integer, got `{raw}`"
                ))
            })?;
            eprintln!("{SEED_ENV}={seed} overrides data.seed, model.init_seed and train.seed");
            self.data.seed = seed;
            self.model.init_seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !matches!(self.eval.split.as_str(), "valid" | "test") {
            return Err(CliError::Usage(format!(
                "eval.split must be valid or test, got `{}`",
                self.eval.split
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

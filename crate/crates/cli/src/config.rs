//! Run configuration files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use totokit::backbone::ModelConfig;
use totokit::data::SynthConfig;
use totokit::engine::{ForecastConfig, TrainConfig};
use totokit::obsbench::EvalConfig;
use totokit::{Error, Result};

pub const SEED_ENV: &str = "TOTOKIT_SEED";

/// Every section is optional; missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub forecast: ForecastConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Seed precedence: flag, then file, then the environment.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?,
            ),
            Err(_) => None,
        };
        self.seed = flag.or(self.seed).or(env);
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.train.seed = s;
            self.forecast.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.eval.validate()?;
        if self.forecast.num_samples == 0 {
            return Err(Error::Config("forecast.num_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

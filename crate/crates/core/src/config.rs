//! Run configuration files (TOML with an explicit schema version).

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, TtaConfig};
use crate::error::{Error, Result};
use crate::train::{default_stages, StageConfig};

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Toy data used when no dataset file is given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 140,
            val: 35,
            test: 35,
            noise: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Side of the square network input.
    pub image_side: usize,
    /// Limit on records taken from each FER split (0 = all).
    #[serde(default)]
    pub max_records: usize,
    pub synthetic: SyntheticConfig,
    /// Image preparation for `ingest`.
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub tta: TtaConfig,
    pub stages: Vec<StageConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            seed: 0,
            image_side: 8,
            max_records: 0,
            synthetic: SyntheticConfig::default(),
            preprocess: PreprocessConfig::default(),
            tta: TtaConfig {
                shift_px: 1.0,
                ..TtaConfig::default()
            },
            stages: default_stages(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported run config schema version {}",
                self.schema_version
            )));
        }
        if self.image_side == 0 || self.preprocess.size == 0 {
            return Err(Error::config("image sizes must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one training stage is required"));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.starts_with("schema_version = 1\n"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_versions_and_stages() {
        let text = RunConfig::default().to_toml().unwrap();
        assert!(RunConfig::from_toml(&text.replace("schema_version = 1", "schema_version = 2")).is_err());
        assert!(RunConfig::from_toml(&text.replacen("patience = 30", "patience = 0", 1)).is_err());
        assert!(matches!(RunConfig::from_toml("seed = 1"), Err(Error::TomlDe(_))));
    }
}

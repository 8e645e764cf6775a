//! Declarative harness configuration: label map and zero-shot exclusions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionLabel, LabelMap};

pub const CONFIG_VERSION: u32 = 1;

const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub version: u32,
    #[serde(default)]
    pub labels: LabelMap,
    #[serde(default)]
    pub zero_shot: ExclusionTable,
}

/// Which datasets each encoder saw during pre-training.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionTable {
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub exclusions: BTreeMap<String, BTreeSet<String>>,
}

impl ExclusionTable {
    /// `Ok(true)` when the pairing must be refused.
    pub fn is_excluded(&self, model_id: &str, dataset_id: &str) -> Result<bool, crate::corpus::CorpusError> {
        match self.exclusions.get(model_id) {
            Some(datasets) => Ok(datasets.contains(dataset_id)),
            None if self.strict => Err(crate::corpus::CorpusError::UnknownModel(model_id.to_string())),
            None => Ok(false),
        }
    }
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: cfg.version });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let tables = std::iter::once(&self.labels.common).chain(self.labels.datasets.values());
        for table in tables {
            for (raw, target) in table {
                if target.parse::<EmotionLabel>().is_err() {
                    return Err(ConfigError::Invalid(format!(
                        "label {raw:?} maps to {target:?}, which is not a unified label"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled config is valid")
    }
}

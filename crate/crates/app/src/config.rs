//! TOML configuration shared by the CLI and the service.
//!
//! Every field has a default, so a config file only needs the values it
//! changes. Command-line flags and environment variables override it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lymphdet_core::annotation::DEFAULT_R1;
use lymphdet_core::model::NetworkConfig;
use lymphdet_core::trainer::{FineTuneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    pub service: ServiceConfig,
    /// Positive dilation radius for compiling annotations.
    pub r1: f64,
    /// Fraction of each dataset held out for validation.
    pub validation_ratio: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            finetune: FineTuneConfig::default(),
            service: ServiceConfig::default(),
            r1: DEFAULT_R1,
            validation_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub bind: String,
    /// Checkpoint registered as the first model when the registry is empty.
    pub model: Option<PathBuf>,
    /// Prior training data (`<stem>.png` + `<stem>.jsonl` pairs) used for
    /// the replay and validation sets of fine-tuning.
    pub prior_dir: Option<PathBuf>,
    /// Unconsumed corrections that start a fine-tuning round.
    pub finetune_trigger: usize,
    /// Largest request body accepted, in bytes.
    pub max_upload_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            bind: "127.0.0.1:8080".into(),
            model: None,
            prior_dir: None,
            finetune_trigger: 200,
            max_upload_bytes: 64 << 20,
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The file at `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

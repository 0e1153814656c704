use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ranet::data::SplitRatios;
use ranet::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Optimizer and loop settings as they appear in a config file. The seed
/// lives at the top level of [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rotation_degrees: f64,
    pub repeats: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            initial_lr: t.initial_lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            rotation_degrees: t.rotation_degrees,
            repeats: 1,
        }
    }
}

/// Everything a run needs. Missing keys take the defaults below; unknown keys
/// are rejected.
///
/// ```toml
/// seed = 0
/// data_root = "data"
/// output_dir = "runs"
///
/// [model]
/// input_size = 224
/// stem_channels = 32
/// num_classes = 2
/// channel_scale = 1.0
/// head_hidden = 64
///
/// [train]
/// initial_lr = 1e-4
/// batch_size = 8
/// epochs = 100
/// rotation_degrees = 15.0
/// repeats = 1
///
/// [split]
/// train = 0.7
/// test = 0.2
/// validation = 0.1
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: None,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            split: SplitRatios::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Loop settings for repeat `repeat` (seeds advance by one per repeat).
    pub fn train_config(&self, repeat: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            initial_lr: t.initial_lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: self.seed.wrapping_add(repeat as u64),
            rotation_degrees: t.rotation_degrees,
        }
    }
}

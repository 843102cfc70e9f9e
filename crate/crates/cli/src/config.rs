//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use bmnet_core::cost::GateConstants;
use bmnet_core::data::AugmentConfig;
use bmnet_core::nn::AdamConfig;
use serde::Deserialize;

use crate::error::CliError;

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub approx_math: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: Option<DatasetConfig>,
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub conversion: ConversionSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub gates: GateConstants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Synthetic,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the raw files (MNIST, CIFAR-10).
    pub path: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Keep only the first `n` training samples after the split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub shape: [usize; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            test_samples: 200,
            classes: 10,
            shape: [28, 28, 1],
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// A `bmnet-spec-v1` JSON file.
    pub spec: Option<PathBuf>,
    /// `lenet_like` or `resnet22`.
    pub builtin: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Enables early stopping on validation accuracy, with `epochs` as the cap.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            patience: None,
            batch_size: 64,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConversionSection {
    /// Classical checkpoint to start from; defaults to the one `train` writes.
    pub checkpoint: Option<PathBuf>,
    pub layer_order: Vec<String>,
    pub epochs_per_layer: usize,
    pub final_max_epochs: usize,
    pub final_patience: usize,
}

impl Default for ConversionSection {
    fn default() -> Self {
        let plan = bmnet_core::training::ConversionPlan::default();
        Self {
            checkpoint: None,
            layer_order: plan.layer_order,
            epochs_per_layer: plan.epochs_per_layer,
            final_max_epochs: plan.final_max_epochs,
            final_patience: plan.final_patience,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.conversion.checkpoint);
        fix(&mut cfg.evaluate.checkpoint);
        if let Some(d) = cfg.dataset.as_mut() {
            fix(&mut d.path);
        }
        if let Some(n) = cfg.network.as_mut() {
            fix(&mut n.spec);
        }
        Ok(cfg)
    }
}

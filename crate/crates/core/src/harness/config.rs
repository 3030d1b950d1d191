use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::{read_file, SynthParams};
use crate::optim::SgdConfig;
use crate::pruner::{Budget, PruneConfig, Variant};

/// Where the training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian-blob images drawn from a fixed seed.
    Synth {
        dims: [usize; 3],
        classes: usize,
        seed: u64,
        #[serde(default)]
        params: SynthParams,
    },
    /// MNIST-style IDX image and label files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
    /// CIFAR-10 binary batches.
    Cifar { train: Vec<PathBuf>, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Leading records kept from each split.
    pub train_count: usize,
    pub test_count: usize,
    /// Standardise pixels with the training split's mean and deviation
    /// (recorded in the checkpoint); off keeps the raw `[0, 1]` scale.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth {
                dims: [1, 28, 28],
                classes: 10,
                seed: 1234,
                params: SynthParams::default(),
            },
            train_count: 10_000,
            test_count: 2_000,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Output channels of each 3x3 conv layer.
    pub channels: Vec<usize>,
    /// Conv indices (0-based) followed by a 2x2 max-pool.
    pub pool_after: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            channels: vec![16, 32, 32, 64],
            pool_after: vec![1, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub sgd: SgdConfig,
    /// Fractions of `epochs` after which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            // Networks without normalisation layers diverge at 0.1.
            sgd: SgdConfig {
                lr: 0.02,
                ..SgdConfig::default()
            },
            decay_points: vec![0.5, 0.75],
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn finetune_default() -> Self {
        TrainConfig {
            epochs: 10,
            sgd: SgdConfig {
                lr: 0.002,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .decay_points
            .iter()
            .filter(|&&p| epoch as f64 >= p * self.epochs as f64)
            .count();
        self.sgd.lr * self.decay_factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub locations: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            locations: vec![10],
        }
    }
}

/// Everything the command-line pipeline needs, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Keys given here override [`TrainConfig::finetune_default`].
    #[serde(deserialize_with = "finetune_overrides")]
    pub finetune: TrainConfig,
    pub prune: PruneConfig,
    pub experiment: ExperimentConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 0,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            prune: PruneConfig {
                budget: Budget::FlopsRatio(2.0),
                ..PruneConfig::default()
            },
            experiment: ExperimentConfig::default(),
        }
    }
}

fn finetune_overrides<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let patch = toml::Table::deserialize(d)?;
    let mut base = toml::Table::try_from(TrainConfig::finetune_default()).map_err(D::Error::custom)?;
    base.extend(patch);
    base.try_into().map_err(D::Error::custom)
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            Error::parse(offset, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::parse(e.utf8_error().valid_up_to(), "config is not UTF-8"))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.channels.is_empty() {
            return Err(Error::invalid("network needs at least one conv layer"));
        }
        self.train.validate()?;
        self.finetune.validate()?;
        self.prune.validate()?;
        if self.data.train_count == 0 {
            return Err(Error::invalid("train_count must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = HarnessConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(HarnessConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = HarnessConfig::from_toml(
            "seed = 4\n[train]\nepochs = 3\nlr = 0.05\n[prune]\nvariant = \"cp_baseline\"\nbudget = { flops_ratio = 3.0 }\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.sgd.lr, 0.05);
        assert_eq!(cfg.train.sgd.momentum, 0.9);
        assert_eq!(cfg.prune.variant, Variant::CpBaseline);
        assert_eq!(cfg.prune.budget, Budget::FlopsRatio(3.0));
        assert_eq!(cfg.finetune.sgd.lr, 0.002);
        let cfg = HarnessConfig::from_toml("[finetune]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.finetune.epochs, 2);
        assert_eq!(cfg.finetune.sgd.lr, 0.002);
    }

    #[test]
    fn bad_toml_is_a_parse_error() {
        assert!(matches!(HarnessConfig::from_toml("seed = ["), Err(Error::Parse { .. })));
        assert!(HarnessConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0), 0.02);
        assert_eq!(t.lr_at(9), 0.02);
        assert!((t.lr_at(10) - 0.002).abs() < 1e-15);
        assert!((t.lr_at(15) - 0.0002).abs() < 1e-15);
        assert_eq!(TrainConfig::finetune_default().sgd.lr, 0.002);
    }
}

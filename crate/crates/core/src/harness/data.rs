use super::config::{DataConfig, DataSource};
use crate::error::{Error, Result};
use crate::model_io::{load_cifar_binary, load_idx, synth_dataset_with, Dataset, Metadata};
use crate::tensor::Tensor;

/// Raw (unnormalised) training and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let (train, test) = match &cfg.source {
            DataSource::Synth {
                dims,
                classes,
                seed,
                params,
            } => {
                // Disjoint streams for the two splits.
                let train = synth_dataset_with(*seed, cfg.train_count, *classes, *dims, params)?;
                let test = synth_dataset_with(seed.wrapping_add(0x5EED), cfg.test_count, *classes, *dims, params)?;
                (train, test)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => (
                load_idx(train_images, train_labels, *classes, "train")?,
                load_idx(test_images, test_labels, *classes, "test")?,
            ),
            DataSource::Cifar { train, test } => {
                let mut parts = Vec::with_capacity(train.len());
                for path in train {
                    parts.push(load_cifar_binary(path, "train")?);
                }
                (concat(&parts, "train")?, load_cifar_binary(test, "test")?)
            }
        };
        let train_name = train.split.clone();
        let test_name = test.split.clone();
        Ok(Splits {
            train: train.take(cfg.train_count, train_name)?,
            test: test.take(cfg.test_count, test_name)?,
        })
    }
}

fn concat(parts: &[Dataset], split: &str) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::invalid("no training batches listed"))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.image_dims() != first.image_dims() {
            return Err(Error::invalid("training batches have different image sizes"));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let mut dims = vec![labels.len()];
    dims.extend_from_slice(first.image_dims());
    Dataset::new(Tensor::new(dims, data)?, labels, first.num_classes, split)
}

/// Applies the pixel normalisation recorded in a checkpoint, if any.
pub fn normalize_for(meta: &Metadata, data: &Dataset) -> Result<Dataset> {
    match (meta.pixel_mean, meta.pixel_std) {
        (Some(mean), Some(std)) => data.standardized(mean, std),
        _ => Ok(data.clone()),
    }
}

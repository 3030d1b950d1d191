use std::path::Path;

use super::{read_file, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by a 3x32x32 channel-major image.
pub const CIFAR_RECORD_LEN: usize = 3073;
const CIFAR_CLASSES: usize = 10;

pub fn parse_cifar_binary(bytes: &[u8], split: &str) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::parse(
            bytes.len() - bytes.len() % CIFAR_RECORD_LEN,
            format!(
                "file length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD_LEN - 1));
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::parse(r * CIFAR_RECORD_LEN, format!("label byte {label} exceeds 9")));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![count, 3, 32, 32], pixels)?,
        labels,
        CIFAR_CLASSES,
        split,
    )
}

pub fn load_cifar_binary(path: &Path, split: &str) -> Result<Dataset> {
    parse_cifar_binary(&read_file(path)?, split)
}

/// Inverse of [`parse_cifar_binary`] for datasets whose pixels are exact
/// multiples of 1/255.
pub fn encode_cifar_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_dims() != [3, 32, 32] {
        return Err(Error::invalid(format!("CIFAR images are 3x32x32, got {:?}", ds.image_dims())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (i, &label) in ds.labels.iter().enumerate() {
        if label >= CIFAR_CLASSES {
            return Err(Error::invalid(format!("label {label} exceeds 9")));
        }
        out.push(label as u8);
        let img = &ds.images.data()[i * 3072..(i + 1) * 3072];
        out.extend(img.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

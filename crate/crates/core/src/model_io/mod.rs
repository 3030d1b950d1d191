//! Persistence for models and data: dataset containers (IDX, CIFAR-10
//! binary batches, synthetic blobs) and the checkpoint format.

mod checkpoint;
mod cifar;
mod dataset;
mod idx;
mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, CHECKPOINT_MAGIC};
pub use cifar::{encode_cifar_binary, load_cifar_binary, parse_cifar_binary, CIFAR_RECORD_LEN};
pub use dataset::Dataset;
pub use idx::{encode_idx, load_idx, parse_idx, parse_idx_dataset, IdxArray};
pub use synth::{synth_dataset, synth_dataset_with, SynthParams};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

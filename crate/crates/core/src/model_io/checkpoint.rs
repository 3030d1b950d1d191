use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::network::{LayerParams, Model, NetworkSpec};
use crate::tensor::Tensor;

/// Leading bytes of every checkpoint; the trailing digit is the format
/// version.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CPLI1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub epochs: usize,
    pub dataset: String,
    /// Top-1 accuracy on the evaluation split at save time.
    pub accuracy: Option<f64>,
    /// Pixel normalisation applied before the first layer, if any.
    pub pixel_mean: Option<f64>,
    pub pixel_std: Option<f64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: Metadata,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    role: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: NetworkSpec,
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: Model, meta: Metadata) -> Self {
        Checkpoint { model, meta }
    }

    /// Layout: magic, `u64` LE header length, JSON header, then for each
    /// tensor its little-endian `f64` block followed by a CRC-32 of that
    /// block.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        let mut tensors = Vec::new();
        let mut blocks: Vec<&Tensor> = Vec::new();
        for (k, p) in self.model.params.iter().enumerate() {
            if let Some(p) = p {
                for (role, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                    tensors.push(TensorEntry {
                        layer: k,
                        role: role.into(),
                        dims: t.dims().to_vec(),
                    });
                    blocks.push(t);
                }
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.model.spec.clone(),
            metadata: self.meta.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let payload: usize = blocks.iter().map(|t| t.len() * 8 + 4).sum();
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in blocks {
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic_len = CHECKPOINT_MAGIC.len();
        if bytes.len() < magic_len + 8 {
            return Err(Error::parse(bytes.len(), "truncated checkpoint preamble"));
        }
        if &bytes[..magic_len] != CHECKPOINT_MAGIC {
            if bytes[..4] == CHECKPOINT_MAGIC[..4] {
                return Err(Error::Version {
                    found: String::from_utf8_lossy(&bytes[..magic_len]).into_owned(),
                    expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                });
            }
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[magic_len..magic_len + 8]);
        let header_len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| Error::parse(magic_len, "header length overflows"))?;
        let mut pos = magic_len + 8;
        if bytes.len() - pos < header_len {
            return Err(Error::parse(bytes.len(), "truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&bytes[pos..pos + header_len])
            .map_err(|e| Error::parse(pos, format!("bad header: {e}")))?;
        pos += header_len;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.format_version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        header.spec.validate()?;

        let mut params: Vec<Option<LayerParams>> = vec![None; header.spec.layers.len()];
        let mut pending_weight: Option<(usize, Tensor)> = None;
        for (index, entry) in header.tensors.iter().enumerate() {
            let (wdims, nbias) = header
                .spec
                .layers
                .get(entry.layer)
                .and_then(|l| l.param_dims())
                .ok_or_else(|| Error::Format(format!("tensor {index} targets layer {} without parameters", entry.layer)))?;
            let expected = match entry.role.as_str() {
                "weight" => wdims,
                "bias" => vec![nbias],
                other => return Err(Error::Format(format!("tensor {index}: unknown role {other:?}"))),
            };
            if entry.dims != expected {
                return Err(Error::Format(format!(
                    "tensor {index} (layer {} {}): dims {:?} do not match spec {:?}",
                    entry.layer, entry.role, entry.dims, expected
                )));
            }
            let count: usize = expected.iter().product();
            let block = count * 8;
            if bytes.len() - pos < block + 4 {
                return Err(Error::parse(bytes.len(), format!("tensor {index} truncated")));
            }
            let data_bytes = &bytes[pos..pos + block];
            let mut crc = [0u8; 4];
            crc.copy_from_slice(&bytes[pos + block..pos + block + 4]);
            let stored = u32::from_le_bytes(crc);
            let computed = crc32fast::hash(data_bytes);
            if stored != computed {
                return Err(Error::Checksum {
                    index,
                    stored,
                    computed,
                });
            }
            pos += block + 4;
            let data = data_bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(expected, data)?;
            match entry.role.as_str() {
                "weight" => pending_weight = Some((entry.layer, tensor)),
                _ => match pending_weight.take() {
                    Some((layer, weight)) if layer == entry.layer => {
                        params[layer] = Some(LayerParams { weight, bias: tensor });
                    }
                    _ => return Err(Error::Format(format!("tensor {index}: bias without preceding weight"))),
                },
            }
        }
        if pos != bytes.len() {
            return Err(Error::parse(pos, "trailing bytes after last tensor"));
        }
        let model = Model {
            spec: header.spec,
            params,
        };
        model.validate()?;
        Ok(Checkpoint {
            model,
            meta: header.metadata,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

use std::path::Path;

use super::{read_file, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

/// Raw unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX container: two zero bytes, type code (only `0x08`,
/// unsigned bytes, is supported), rank, big-endian `u32` extents, payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::parse(bytes.len(), "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != UBYTE {
        return Err(Error::parse(2, format!("unsupported IDX type code {:#04x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::parse(3, "IDX rank must be at least 1"));
    }
    let header_end = 4 + 4 * rank;
    if bytes.len() < header_end {
        return Err(Error::parse(bytes.len(), "truncated IDX dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header_end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let declared = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse(4, "IDX extents overflow"))?;
    let available = bytes.len() - header_end;
    if available < declared {
        return Err(Error::parse(
            bytes.len(),
            format!("IDX payload truncated: {declared} bytes declared, {available} present"),
        ));
    }
    if available > declared {
        return Err(Error::parse(
            header_end + declared,
            format!("{} trailing bytes after IDX payload", available - declared),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header_end..].to_vec(),
    })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(Error::invalid("IDX rank must be in 1..=255"));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape("IDX payload", dims.iter().product(), data.len()));
    }
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("IDX extent exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Builds a dataset from an image array (`[n, h, w]` or `[n, c, h, w]`)
/// and a label array (`[n]`).
pub fn parse_idx_dataset(images: &[u8], labels: &[u8], num_classes: usize, split: &str) -> Result<Dataset> {
    let img = parse_idx(images)?;
    let lab = parse_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(Error::shape("IDX label rank", 1, lab.dims.len()));
    }
    let dims = match img.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        other => return Err(Error::invalid(format!("IDX image rank {} unsupported", other.len()))),
    };
    if dims[0] != lab.dims[0] {
        return Err(Error::invalid(format!(
            "IDX image count {} does not match label count {}",
            dims[0], lab.dims[0]
        )));
    }
    let header = 4 + 4 * lab.dims.len();
    if let Some(pos) = lab.data.iter().position(|&l| l as usize >= num_classes) {
        return Err(Error::parse(
            header + pos,
            format!("label {} out of range for {num_classes} classes", lab.data[pos]),
        ));
    }
    let pixels = img.data.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(dims, pixels)?,
        lab.data.iter().map(|&l| l as usize).collect(),
        num_classes,
        split,
    )
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, split: &str) -> Result<Dataset> {
    parse_idx_dataset(&read_file(images)?, &read_file(labels)?, num_classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_image_fixture() -> (Vec<u8>, Vec<u8>) {
        let images = vec![
            0x00, 0x00, 0x08, 0x03, // magic
            0x00, 0x00, 0x00, 0x02, // 2 images
            0x00, 0x00, 0x00, 0x02, // 2 rows
            0x00, 0x00, 0x00, 0x02, // 2 cols
            0, 255, 51, 102, //
            204, 153, 1, 2,
        ];
        let labels = vec![0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 7, 3];
        (images, labels)
    }

    #[test]
    fn hand_written_fixture_parses_exactly() {
        let (images, labels) = two_image_fixture();
        let ds = parse_idx_dataset(&images, &labels, 10, "train").unwrap();
        assert_eq!(ds.images.dims(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[..4], [0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.images.data()[4..], [0.8, 0.6, 1.0 / 255.0, 2.0 / 255.0]);
    }

    #[test]
    fn zero_image_file_is_empty() {
        let images = encode_idx(&[0, 28, 28], &[]).unwrap();
        let labels = encode_idx(&[0], &[]).unwrap();
        let ds = parse_idx_dataset(&images, &labels, 10, "test").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.image_dims(), &[1, 28, 28]);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let (images, _) = two_image_fixture();
        let labels = encode_idx(&[3], &[1, 2, 3]).unwrap();
        assert!(parse_idx_dataset(&images, &labels, 10, "x").is_err());
    }

    #[test]
    fn truncation_and_bad_magic_report_offsets() {
        let (mut images, _) = two_image_fixture();
        images.pop();
        let err = parse_idx(&images).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 23, .. }), "{err}");
        let err = parse_idx(&[0, 1, 8, 1]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        let err = parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 2, .. }));
        // A huge declared extent must fail without allocating it.
        let err = parse_idx(&[0, 0, 8, 1, 0xff, 0xff, 0xff, 0xff]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let (images, mut labels) = two_image_fixture();
        labels[9] = 10;
        let err = parse_idx_dataset(&images, &labels, 10, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 9, .. }), "{err}");
    }

    #[test]
    fn encode_parse_round_trip() {
        let data: Vec<u8> = (0..24).collect();
        let bytes = encode_idx(&[2, 3, 4], &data).unwrap();
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dims, vec![2, 3, 4]);
        assert_eq!(arr.data, data);
        assert_eq!(encode_idx(&arr.dims, &arr.data).unwrap(), bytes);
    }
}

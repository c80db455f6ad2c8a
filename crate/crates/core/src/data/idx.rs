//! IDX binary format (the MNIST container).
//!
//! Layout: 4-byte big-endian magic `0x0000 08 NN` where `0x08` marks unsigned
//! bytes and `NN` is the number of dimensions, then `NN` big-endian u32 sizes,
//! then the raw payload. Images use magic `0x00000803`, labels `0x00000801`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("{source_name}: bad magic 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    BadMagic {
        source_name: String,
        found: u32,
        expected: u32,
    },
    #[error("{source_name}: truncated at byte {offset}: need {needed} bytes, file has {available}")]
    Truncated {
        source_name: String,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{source_name}: {extra} unexpected trailing bytes after byte {offset}")]
    TrailingBytes {
        source_name: String,
        offset: usize,
        extra: usize,
    },
    #[error("image file has {images} samples but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{source_name}: label {label} at byte {offset} is outside 0..{classes}")]
    LabelRange {
        source_name: String,
        offset: usize,
        label: u8,
        classes: usize,
    },
}

/// Raw image tensor: `count` images of `rows x cols` bytes each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, source_name: &str) -> Result<u32, IdxError> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(IdxError::Truncated {
            source_name: source_name.to_string(),
            offset,
            needed: offset + 4,
            available: bytes.len(),
        }),
    }
}

fn header(bytes: &[u8], expected: u32, source_name: &str) -> Result<Vec<usize>, IdxError> {
    let magic = read_u32(bytes, 0, source_name)?;
    if magic != expected {
        return Err(IdxError::BadMagic {
            source_name: source_name.to_string(),
            found: magic,
            expected,
        });
    }
    let ndim = (expected & 0xff) as usize;
    (0..ndim)
        .map(|d| read_u32(bytes, 4 + 4 * d, source_name).map(|v| v as usize))
        .collect()
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, source_name: &str) -> Result<&'a [u8], IdxError> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            source_name: source_name.to_string(),
            offset: bytes.len(),
            needed: end,
            available: bytes.len(),
        });
    }
    if bytes.len() > end {
        return Err(IdxError::TrailingBytes {
            source_name: source_name.to_string(),
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(&bytes[offset..end])
}

pub fn parse_images(bytes: &[u8], source_name: &str) -> Result<IdxImages, IdxError> {
    let dims = header(bytes, IMAGES_MAGIC, source_name)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = payload(bytes, 16, count * rows * cols, source_name)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: pixels.to_vec(),
    })
}

/// Parses a label file and checks every label against `classes`.
pub fn parse_labels(bytes: &[u8], classes: usize, source_name: &str) -> Result<Vec<u8>, IdxError> {
    let dims = header(bytes, LABELS_MAGIC, source_name)?;
    let labels = payload(bytes, 8, dims[0], source_name)?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(IdxError::LabelRange {
            source_name: source_name.to_string(),
            offset: 8 + i,
            label: labels[i],
            classes,
        });
    }
    Ok(labels.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label file pair into a [`Dataset`](super::Dataset) with
/// pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<super::Dataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;
    let images = parse_images(&img_bytes, &images_path.display().to_string())?;
    let labels = parse_labels(&lbl_bytes, classes, &labels_path.display().to_string())?;
    from_raw(images, labels, classes)
}

pub fn from_raw(images: IdxImages, labels: Vec<u8>, classes: usize) -> Result<super::Dataset> {
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        }
        .into());
    }
    let pixels = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    super::Dataset::new(pixels, labels, images.rows * images.cols, classes)
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<()> {
    fs::write(path, encode_images(images)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (IdxImages, Vec<u8>) {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 51, 102, 1, 254, 7, 8, 9, 10, 11, 12],
        };
        (images, vec![3, 9])
    }

    #[test]
    fn round_trip_is_exact() {
        let (images, labels) = fixture();
        let parsed = parse_images(&encode_images(&images), "mem").unwrap();
        assert_eq!(parsed, images);
        assert_eq!(parse_labels(&encode_labels(&labels), 10, "mem").unwrap(), labels);
        let ds = from_raw(parsed, labels, 10).unwrap();
        assert_eq!(ds.image(0)[1], 1.0);
        assert_eq!(ds.image(0)[2], 0.2);
        assert_eq!(ds.image(1)[0], 7.0 / 255.0);
        assert_eq!(ds.label(1), 9);
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let (images, _) = fixture();
        let bytes = encode_images(&images);
        assert_eq!(&bytes[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]);
    }

    #[test]
    fn bad_magic_is_reported() {
        let labels = encode_labels(&[1, 2]);
        let err = parse_images(&labels, "lbl").unwrap_err();
        assert_eq!(
            err,
            IdxError::BadMagic {
                source_name: "lbl".into(),
                found: LABELS_MAGIC,
                expected: IMAGES_MAGIC
            }
        );
    }

    #[test]
    fn truncation_reports_offsets() {
        let (images, _) = fixture();
        let bytes = encode_images(&images);
        match parse_images(&bytes[..20], "img").unwrap_err() {
            IdxError::Truncated {
                offset,
                needed,
                available,
                ..
            } => {
                assert_eq!((offset, needed, available), (20, 28, 20));
            }
            e => panic!("unexpected {e:?}"),
        }
        match parse_images(&bytes[..6], "img").unwrap_err() {
            IdxError::Truncated { offset, .. } => assert_eq!(offset, 4),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn trailing_bytes_and_label_range() {
        let mut bytes = encode_labels(&[1, 2]);
        bytes.push(0);
        assert!(matches!(parse_labels(&bytes, 10, "l"), Err(IdxError::TrailingBytes { offset: 10, extra: 1, .. })));
        assert!(matches!(
            parse_labels(&encode_labels(&[1, 12]), 10, "l"),
            Err(IdxError::LabelRange { offset: 9, label: 12, .. })
        ));
    }

    #[test]
    fn count_mismatch() {
        let (images, _) = fixture();
        let err = from_raw(images, vec![1], 10).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::CountMismatch { images: 2, labels: 1 })));
        assert_eq!(err.exit_code(), 4);
    }
}

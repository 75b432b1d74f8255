//! Parser for the IDX binary container used by MNIST-family datasets.
//!
//! Layout: a big-endian magic word (0x00000803 for image tensors,
//! 0x00000801 for label vectors), one big-endian u32 per dimension, then the
//! raw unsigned bytes. Image pixels are normalized to `[0, 1]`; labels are
//! returned as raw class bytes.

use std::path::Path;

use crate::error::{MorbitError, Result};

/// Magic word of an image tensor (unsigned bytes, 3 dimensions).
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic word of a label vector (unsigned bytes, 1 dimension).
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed IDX payload.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxTensor {
    /// `count` images of `rows × cols` pixels, flattened row-major per
    /// image and normalized to `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    /// Raw class labels.
    Labels(Vec<u8>),
}

impl IdxTensor {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            IdxTensor::Images { count, rows, cols, .. } => vec![*count, *rows, *cols],
            IdxTensor::Labels(l) => vec![l.len()],
        }
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> MorbitError {
    MorbitError::Parse {
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(parse_err(
            bytes.len(),
            format!("truncated while reading {what}"),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX payload from memory.
pub fn parse_idx_bytes(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = read_u32(bytes, 0, "magic word")?;
    match magic {
        LABELS_MAGIC => {
            let count = read_u32(bytes, 4, "label count")? as usize;
            let expected = 8 + count;
            if bytes.len() < expected {
                return Err(parse_err(
                    bytes.len(),
                    format!("label payload ends early: need {count} bytes"),
                ));
            }
            if bytes.len() > expected {
                return Err(parse_err(expected, "trailing bytes after label payload"));
            }
            Ok(IdxTensor::Labels(bytes[8..].to_vec()))
        }
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4, "image count")? as usize;
            let rows = read_u32(bytes, 8, "row count")? as usize;
            let cols = read_u32(bytes, 12, "column count")? as usize;
            let payload = count
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or_else(|| parse_err(4, "image dimensions overflow"))?;
            let expected = 16 + payload;
            if bytes.len() < expected {
                return Err(parse_err(
                    bytes.len(),
                    format!("image payload ends early: need {payload} bytes"),
                ));
            }
            if bytes.len() > expected {
                return Err(parse_err(expected, "trailing bytes after image payload"));
            }
            let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxTensor::Images {
                count,
                rows,
                cols,
                pixels,
            })
        }
        other => Err(parse_err(
            0,
            format!("unrecognized magic word {other:#010x}"),
        )),
    }
}

/// Reads and parses an IDX file.
pub fn parse_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path)?;
    parse_idx_bytes(&bytes)
}

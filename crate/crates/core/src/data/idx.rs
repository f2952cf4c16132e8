//! Reader for the IDX binary layout used by the MNIST-family datasets.
//!
//! Images: magic `0x00000803`, then three big-endian u32 dimensions
//! `(count, rows, cols)`, then `count * rows * cols` bytes.
//! Labels: magic `0x00000801`, one dimension `(count)`, then `count` bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::IMAGE_SIDE;

use super::{Dataset, Source, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::IdxFormat {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("file ends inside the {what} field"),
        ));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parses image bytes, returning the image count and the raw pixel buffer.
pub(super) fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} for images"),
        ));
    }
    let count = read_u32(bytes, 4, path, "count")? as usize;
    let rows = read_u32(bytes, 8, path, "rows")? as usize;
    let cols = read_u32(bytes, 12, path, "cols")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(format_err(
            path,
            8,
            format!("{rows} x {cols} images, expected {IMAGE_SIDE} x {IMAGE_SIDE}"),
        ));
    }
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("{} bytes, header declares {expected}", bytes.len()),
        ));
    }
    Ok((count, bytes[16..].to_vec()))
}

/// Parses label bytes, returning one label per example.
pub(super) fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("magic {magic:#010x}, expected {LABELS_MAGIC:#010x} for labels"),
        ));
    }
    let count = read_u32(bytes, 4, path, "count")? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("{} bytes, header declares {expected}", bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Structural check used on cached files: header and length must agree.
pub(super) fn check_structure(bytes: &[u8], path: &Path) -> Result<u64> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    let expected = match magic {
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4, path, "count")? as usize;
            let rows = read_u32(bytes, 8, path, "rows")? as usize;
            let cols = read_u32(bytes, 12, path, "cols")? as usize;
            16 + count * rows * cols
        }
        LABELS_MAGIC => 8 + read_u32(bytes, 4, path, "count")? as usize,
        other => {
            return Err(format_err(
                path,
                0,
                format!("magic {other:#010x} is neither images nor labels"),
            ))
        }
    };
    if bytes.len() != expected {
        return Err(Error::CacheIntegrity {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(expected as u64)
}

/// Loads a paired images/labels file set into a [`Dataset`].
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    source: Source,
    split: Split,
) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (count, images) = parse_images(&image_bytes, images_path)?;
    let labels = parse_labels(&label_bytes, labels_path)?;
    if labels.len() != count {
        return Err(Error::DatasetConsistency(format!(
            "{} declares {count} images but {} declares {} labels",
            images_path.display(),
            labels_path.display(),
            labels.len()
        )));
    }
    Dataset::new(source, split, images, labels)
}

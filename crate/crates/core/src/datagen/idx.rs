//! IDX binary files (the MNIST/Fashion-MNIST container format).

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, ParseErrorKind, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(path: &Path, kind: ParseErrorKind) -> Error {
    Error::Parse { path: path.to_path_buf(), kind }
}

struct Header {
    dims: Vec<usize>,
    body: usize,
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Header> {
    let header_len = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(parse_err(path, ParseErrorKind::Truncated { expected: header_len, found: bytes.len() }));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(parse_err(path, ParseErrorKind::BadMagic { expected: magic, found }));
    }
    if bytes.len() < header_len {
        return Err(parse_err(path, ParseErrorKind::Truncated { expected: header_len, found: bytes.len() }));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header_len + payload {
        return Err(parse_err(
            path,
            ParseErrorKind::Truncated { expected: header_len + payload, found: bytes.len() },
        ));
    }
    Ok(Header { dims, body: header_len })
}

/// Reads an image file; returns `(rows, pixels_per_row)` with pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let h = read_header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (n, width) = (h.dims[0], h.dims[1] * h.dims[2]);
    if width == 0 {
        return Err(parse_err(path, ParseErrorKind::Malformed("zero-sized images".into())));
    }
    let pixels = bytes[h.body..h.body + n * width]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok((pixels, width))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let h = read_header(path, &bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[h.body..h.body + h.dims[0]].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. `num_classes` is one past the largest label
/// (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (pixels, width) = read_idx_images(images_path.as_ref())?;
    let labels = read_idx_labels(labels_path.as_ref())?;
    let images = pixels.len() / width;
    if images != labels.len() {
        return Err(parse_err(
            labels_path.as_ref(),
            ParseErrorKind::CountMismatch { images, labels: labels.len() },
        ));
    }
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    LabeledDataset::new(pixels, width, labels, num_classes)
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per_image = rows * cols;
    if per_image == 0 || pixels.len() % per_image != 0 {
        return Err(crate::error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [pixels.len() / per_image, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

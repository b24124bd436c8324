//! IDX (MNIST layout) images and labels: big-endian header, u8 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::format(
                offset as u64,
                format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
            )
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::format(0, format!("bad magic {magic:#010x}, expected {want:#010x}")));
    }
    Ok(())
}

fn payload(bytes: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let need = header + len;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: expected {need} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(Error::format(
            need as u64,
            format!("{} trailing bytes after payload", bytes.len() - need),
        ));
    }
    Ok(&bytes[header..])
}

/// Images as `[N, 1, H, W]` scaled by 1/255.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, "zero dimension in image header"));
    }
    let px = payload(bytes, 16, n * h * w)?;
    Tensor::new(&[n, 1, h, w], px.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. The class count is `max(label) + 1`,
/// at least 2.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_idx_images(&fs::read(images_path.as_ref())?)?;
    let labels = read_idx_labels(&fs::read(labels_path.as_ref())?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.shape()[0], labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let split = images_path
        .as_ref()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, classes, split)
}

/// Writes a single-channel dataset as an IDX pair (pixels rounded to u8).
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = ds.sample_shape();
    if c != 1 {
        return Err(Error::contract("IDX images are single-channel"));
    }
    if let Some(&y) = ds.labels.iter().find(|&&y| y > 255) {
        return Err(Error::contract(format!("label {y} does not fit in a byte")));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|v| (v * 255.0).round() as u8));
    fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

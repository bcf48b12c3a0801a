use std::fs;
use std::path::Path;

use super::{byte_from_pixel, pixel_from_byte, Dataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(buf: &[u8], at: usize, path: &Path, need: u64) -> Result<u32> {
    let bytes = buf.get(at..at + 4).ok_or_else(|| Error::IdxTruncated {
        path: path.to_path_buf(),
        expected: need,
        found: buf.len() as u64,
    })?;
    Ok(u32::from_be_bytes(bytes.try_into().expect("4 bytes")))
}

fn check_magic(buf: &[u8], path: &Path, what: &'static str, expected: u32, header: u64) -> Result<()> {
    let found = read_u32(buf, 0, path, header)?;
    if found != expected {
        return Err(Error::IdxMagic { what, expected, found });
    }
    Ok(())
}

fn check_len(buf: &[u8], path: &Path, expected: u64) -> Result<()> {
    if (buf.len() as u64) < expected {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected,
            found: buf.len() as u64,
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x00000803`, `n×rows×cols` bytes) and its
/// label file (`0x00000801`). Bytes are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ibuf = fs::read(ipath)?;
    let lbuf = fs::read(lpath)?;

    check_magic(&ibuf, ipath, "images", IMAGES_MAGIC, 16)?;
    let n_images = read_u32(&ibuf, 4, ipath, 16)? as usize;
    let rows = read_u32(&ibuf, 8, ipath, 16)? as usize;
    let cols = read_u32(&ibuf, 12, ipath, 16)? as usize;

    check_magic(&lbuf, lpath, "labels", LABELS_MAGIC, 8)?;
    let n_labels = read_u32(&lbuf, 4, lpath, 8)? as usize;
    if n_images != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    check_len(&ibuf, ipath, 16 + (n_images * pixels) as u64)?;
    check_len(&lbuf, lpath, 8 + n_labels as u64)?;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("{}: empty image dimensions", ipath.display())));
    }

    let labels = &lbuf[8..8 + n_labels];
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = ibuf[16..16 + n_images * pixels]
        .chunks_exact(pixels)
        .zip(labels)
        .enumerate()
        .map(|(id, (img, label))| Sample {
            image: Tensor::new(vec![rows, cols, 1], img.iter().map(|b| pixel_from_byte(*b)).collect())
                .expect("image shape"),
            label: *label as usize,
            id,
        })
        .collect();
    Dataset::new(samples, num_classes.max(2))
}

/// Writes single-channel `dataset` as an IDX image/label pair. Pixels are
/// quantized to the nearest 8-bit level.
pub fn export_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = dataset
        .image_shape()
        .ok_or_else(|| Error::EmptySubset("cannot export an empty dataset".into()))?;
    let [rows, cols, 1] = *shape else {
        return Err(Error::InvalidArgument(format!(
            "IDX export needs single-channel images, got {shape:?}"
        )));
    };
    if dataset.num_classes > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let n = dataset.len();
    let mut ibuf = Vec::with_capacity(16 + n * rows * cols);
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        ibuf.extend_from_slice(&v.to_be_bytes());
    }
    let mut lbuf = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lbuf.extend_from_slice(&v.to_be_bytes());
    }
    for s in &dataset.samples {
        ibuf.extend(s.image.values().iter().map(|v| byte_from_pixel(*v)));
        lbuf.push(s.label as u8);
    }
    fs::write(images, ibuf)?;
    fs::write(labels, lbuf)?;
    Ok(())
}

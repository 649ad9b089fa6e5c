//! Big-endian IDX files (the MNIST container format).

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("missing {what} at byte {}", self.pos),
            })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            detail: format!(
                "header declares {len} payload bytes, {} present",
                self.bytes.len() - self.pos
            ),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    let magic = r.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let dims = [r.u32("count")?, r.u32("rows")?, r.u32("cols")?].map(|d| d as usize);
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .unwrap_or(usize::MAX);
    let pixels = r.payload(len)?.to_vec();
    Ok((dims.to_vec(), pixels))
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    let magic = r.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = r.u32("count")? as usize;
    Ok(r.payload(count)?.to_vec())
}

/// Loads an image/label IDX pair as `[N × 1 × rows × cols]` inputs scaled
/// to `[0, 1]`. The class count is `max(label) + 1`, at least 2.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (dims, pixels) = parse_images(images_path, &read(images_path)?)?;
    let labels = parse_labels(labels_path, &read(labels_path)?)?;
    if dims[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: dims[0],
            labels: labels.len(),
        });
    }
    if dims[0] == 0 {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: "file holds no images".into(),
        });
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    LabeledDataset::new(inputs, labels, num_classes)
}

/// Writes `count × rows × cols` u8 pixels as an IDX image file.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

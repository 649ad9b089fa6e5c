//! CIFAR binary batches: each record is the label byte(s) followed by 3072
//! channel-major pixel bytes (1024 red, 1024 green, 1024 blue).

use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn label_bytes(num_classes: usize) -> usize {
    // the 100-class variant stores coarse then fine label
    if num_classes > 10 {
        2
    } else {
        1
    }
}

/// Loads and concatenates CIFAR binary files. For the 100-class layout the
/// fine (second) label byte is used.
pub fn load_cifar_binary(paths: &[PathBuf], num_classes: usize) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::Parameter("no CIFAR files given".into()));
    }
    let lb = label_bytes(num_classes);
    let record = lb + CIFAR_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::RecordSize {
                path: path.clone(),
                len: bytes.len() as u64,
                record: record as u64,
            });
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[lb - 1] as usize;
            if label >= num_classes {
                return Err(Error::LabelRange { label, num_classes });
            }
            labels.push(label);
            pixels.extend(rec[lb..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let inputs = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    LabeledDataset::new(inputs, labels, num_classes)
}

/// Writes records in the same layout. `labels` holds one entry per record:
/// `(coarse, fine)`; the coarse byte is only written for > 10 classes.
pub fn write_cifar_binary(
    path: &Path,
    num_classes: usize,
    labels: &[(u8, u8)],
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::CountMismatch {
            images: pixels.len() / CIFAR_PIXELS,
            labels: labels.len(),
        });
    }
    let mut out = Vec::new();
    for (&(coarse, fine), px) in labels.iter().zip(pixels.chunks_exact(CIFAR_PIXELS)) {
        if label_bytes(num_classes) == 2 {
            out.push(coarse);
        }
        out.push(fine);
        out.extend_from_slice(px);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! Labeled datasets: synthetic generators, IDX and CIFAR binary loaders,
//! normalization and train-time augmentation.

mod augment;
mod cifar;
mod idx;
mod synthetic;

pub use augment::augment_batch;
pub use cifar::{load_cifar_binary, write_cifar_binary, CIFAR_PIXELS};
pub use idx::{
    load_idx_dataset, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synthetic::{generate_synthetic_dataset, SyntheticKind, SyntheticParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One split: `N` examples with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange { label, num_classes });
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Per-channel normalization statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A train/test pair drawn from the same source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(id: impl Into<String>, train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        if train.example_shape() != test.example_shape() {
            return Err(Error::Shape(format!(
                "train examples {:?} vs test examples {:?}",
                train.example_shape(),
                test.example_shape()
            )));
        }
        if train.num_classes != test.num_classes {
            return Err(Error::Parameter(format!(
                "train has {} classes, test has {}",
                train.num_classes, test.num_classes
            )));
        }
        Ok(Dataset {
            id: id.into(),
            train,
            test,
            normalization: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn example_shape(&self) -> &[usize] {
        self.train.example_shape()
    }

    /// Standardizes each channel (axis 1; the whole row for flat inputs)
    /// with train-split statistics and records them.
    pub fn normalize(&mut self) -> Result<()> {
        let shape = self.train.example_shape().to_vec();
        let (channels, plane) = if shape.len() >= 2 {
            (shape[0], shape[1..].iter().product())
        } else {
            (shape.iter().product(), 1)
        };
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let n = self.train.len() * plane;
        for row in self.train.inputs.data().chunks(channels * plane) {
            for (c, chunk) in row.chunks(plane).enumerate() {
                for &v in chunk {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let std: Vec<f64> = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n as f64;
                let var = (s / n as f64 - *m * *m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for split in [&mut self.train, &mut self.test] {
            let mut data = split.inputs.data().to_vec();
            for row in data.chunks_mut(channels * plane) {
                for (c, chunk) in row.chunks_mut(plane).enumerate() {
                    for v in chunk {
                        *v = (*v - mean[c]) / std[c];
                    }
                }
            }
            split.inputs = Tensor::new(split.inputs.shape().to_vec(), data)?;
        }
        self.normalization = Some(Normalization { mean, std });
        Ok(())
    }
}

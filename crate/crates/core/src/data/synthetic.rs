use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `K` interleaved arms; class boundaries are strongly nonlinear.
    Spiral,
    /// `K` isotropic Gaussian blobs on the unit circle.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Spiral: angular jitter in radians. Blobs: coordinate standard deviation.
    pub noise: f64,
}

/// Arm sweep in radians from the centre to radius 1.
const SPIRAL_SWEEP: f64 = 4.0;

/// Deterministic 2-D dataset; train and test use independent streams.
pub fn generate_synthetic_dataset(
    kind: SyntheticKind,
    params: &SyntheticParams,
    seed: u64,
) -> Result<Dataset> {
    if params.classes < 2 || params.train_per_class == 0 || params.test_per_class == 0 {
        return Err(Error::Parameter(format!(
            "need ≥ 2 classes and ≥ 1 point per class, got {params:?}"
        )));
    }
    if !(params.noise >= 0.0 && params.noise.is_finite()) {
        return Err(Error::Parameter(format!(
            "noise must be ≥ 0, got {}",
            params.noise
        )));
    }
    let train = sample_split(
        kind,
        params,
        params.train_per_class,
        &mut rng::stream(seed, 0, Purpose::Dataset),
    )?;
    let test = sample_split(
        kind,
        params,
        params.test_per_class,
        &mut rng::stream(seed, 0, Purpose::DatasetTest),
    )?;
    let name = match kind {
        SyntheticKind::Spiral => "spiral",
        SyntheticKind::Blobs => "blobs",
    };
    Dataset::new(format!("{name}{}-seed{seed}", params.classes), train, test)
}

fn sample_split(
    kind: SyntheticKind,
    params: &SyntheticParams,
    per_class: usize,
    rng: &mut StreamRng,
) -> Result<LabeledDataset> {
    let k = params.classes;
    let mut xs = Vec::with_capacity(k * per_class * 2);
    let mut labels = Vec::with_capacity(k * per_class);
    for class in 0..k {
        let phase = TAU * class as f64 / k as f64;
        for _ in 0..per_class {
            let jitter: f64 = StandardNormal.sample(rng);
            let (x, y) = match kind {
                SyntheticKind::Spiral => {
                    let r: f64 = rng.random_range(0.05..1.0);
                    let theta = phase + SPIRAL_SWEEP * r + params.noise * jitter;
                    (r * theta.cos(), r * theta.sin())
                }
                SyntheticKind::Blobs => {
                    let dy: f64 = StandardNormal.sample(rng);
                    (
                        phase.cos() + params.noise * jitter,
                        phase.sin() + params.noise * dy,
                    )
                }
            };
            xs.push(x);
            xs.push(y);
            labels.push(class);
        }
    }
    LabeledDataset::new(Tensor::new(vec![k * per_class, 2], xs)?, labels, k)
}

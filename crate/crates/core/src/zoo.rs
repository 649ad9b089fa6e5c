//! Capacity-ranked model families.
//!
//! A model of depth `k` has `k − 1` hidden weight layers plus one affine
//! classifier:
//!
//! * `mlp`: `k − 1` affine+ReLU layers of a fixed hidden width.
//! * `plain_cnn`: `k − 1` 3×3 conv+ReLU layers. Conv `i` has
//!   `min(base · 2^(i/2), max)` channels and a 2×2 max-pool follows every
//!   second conv until `pool_stages` pools have been applied; pools not yet
//!   used when the convs run out are applied after the last conv. The
//!   classifier therefore always sees a `(H / 2^p) × (W / 2^p)` grid.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    Mlp {
        input_dim: usize,
        hidden_width: usize,
    },
    PlainCnn {
        input_channels: usize,
        height: usize,
        width: usize,
        base_channels: usize,
        max_channels: usize,
        pool_stages: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    /// Number of trainable weight layers, classifier included.
    pub depth: usize,
    pub num_classes: usize,
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::Mlp { hidden_width, .. } => {
                write!(f, "mlp{}(w={hidden_width})", self.depth)
            }
            Family::PlainCnn { base_channels, .. } => {
                write!(f, "plain_cnn{}(c={base_channels})", self.depth)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Affine {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    Conv {
        inputs: usize,
        outputs: usize,
    },
    Pool,
}

impl ModelSpec {
    pub fn mlp(depth: usize, input_dim: usize, hidden_width: usize, num_classes: usize) -> Self {
        ModelSpec {
            family: Family::Mlp {
                input_dim,
                hidden_width,
            },
            depth,
            num_classes,
        }
    }

    /// Plain CNN with the 16 → 64 channel schedule and as many pools (up to
    /// three) as the input extents allow.
    pub fn plain_cnn(depth: usize, input: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = input;
        let mut pool_stages = 0;
        while pool_stages < 3 && h % (2 << pool_stages) == 0 && w % (2 << pool_stages) == 0 {
            pool_stages += 1;
        }
        ModelSpec {
            family: Family::PlainCnn {
                input_channels: c,
                height: h,
                width: w,
                base_channels: 16,
                max_channels: 64,
                pool_stages,
            },
            depth,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Parameter(format!("{self}: depth must be ≥ 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!("{self}: need at least 2 classes")));
        }
        match self.family {
            Family::Mlp {
                input_dim,
                hidden_width,
            } => {
                if input_dim == 0 || hidden_width == 0 {
                    return Err(Error::Parameter(format!("{self}: zero width")));
                }
            }
            Family::PlainCnn {
                input_channels,
                height,
                width,
                base_channels,
                max_channels,
                pool_stages,
            } => {
                if input_channels == 0 || base_channels == 0 || max_channels < base_channels {
                    return Err(Error::Parameter(format!("{self}: bad channel schedule")));
                }
                let div = 1usize << pool_stages;
                if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
                    return Err(Error::Parameter(format!(
                        "{self}: {height}×{width} input not divisible by 2^{pool_stages}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-example input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.family {
            Family::Mlp { input_dim, .. } => vec![input_dim],
            Family::PlainCnn {
                input_channels,
                height,
                width,
                ..
            } => vec![input_channels, height, width],
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        match self.family {
            Family::Mlp {
                input_dim,
                hidden_width,
            } => {
                let mut inputs = input_dim;
                for _ in 0..self.depth - 1 {
                    layers.push(Layer::Affine {
                        inputs,
                        outputs: hidden_width,
                        relu: true,
                    });
                    inputs = hidden_width;
                }
                layers.push(Layer::Affine {
                    inputs,
                    outputs: self.num_classes,
                    relu: false,
                });
            }
            Family::PlainCnn {
                input_channels,
                height,
                width,
                base_channels,
                max_channels,
                pool_stages,
            } => {
                let mut chans = input_channels;
                let mut pools = 0;
                for i in 0..self.depth - 1 {
                    let outputs = (base_channels << (i / 2)).min(max_channels);
                    layers.push(Layer::Conv {
                        inputs: chans,
                        outputs,
                    });
                    chans = outputs;
                    if i % 2 == 1 && pools < pool_stages {
                        layers.push(Layer::Pool);
                        pools += 1;
                    }
                }
                for _ in pools..pool_stages {
                    layers.push(Layer::Pool);
                }
                let grid = (height >> pool_stages) * (width >> pool_stages);
                layers.push(Layer::Affine {
                    inputs: chans * grid,
                    outputs: self.num_classes,
                    relu: false,
                });
            }
        }
        layers
    }

    /// Names and shapes of every trainable tensor, in forward order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut conv = 0;
        let mut hidden = 0;
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Conv { inputs, outputs } => {
                    shapes.push((format!("conv{conv}.weight"), vec![outputs, inputs, 3, 3]));
                    shapes.push((format!("conv{conv}.bias"), vec![outputs]));
                    conv += 1;
                }
                Layer::Affine {
                    inputs, outputs, ..
                } => {
                    let name = if i == last {
                        "classifier".to_string()
                    } else {
                        hidden += 1;
                        format!("hidden{}", hidden - 1)
                    };
                    shapes.push((format!("{name}.weight"), vec![inputs, outputs]));
                    shapes.push((format!("{name}.bias"), vec![outputs]));
                }
                Layer::Pool => {}
            }
        }
        shapes
    }
}

/// Exact number of trainable scalars.
pub fn parameter_count(spec: &ModelSpec) -> usize {
    spec.tensor_shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Orders specs by strictly decreasing parameter count; the head is the
/// teacher and the tail the student.
pub fn capacity_order(specs: &[ModelSpec]) -> Result<Vec<ModelSpec>> {
    if specs.is_empty() {
        return Err(Error::Ladder("empty ladder".into()));
    }
    let mut ranked: Vec<(usize, &ModelSpec)> =
        specs.iter().map(|s| (parameter_count(s), s)).collect();
    ranked.sort_by_key(|r| std::cmp::Reverse(r.0));
    for pair in ranked.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Ladder(format!(
                "{} and {} both have {} parameters",
                pair[0].1, pair[1].1, pair[0].0
            )));
        }
    }
    Ok(ranked.into_iter().map(|(_, s)| s.clone()).collect())
}

/// Named trainable tensors of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub seed: u64,
    tensors: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn from_tensors(seed: u64, tensors: Vec<(String, Tensor)>) -> Self {
        ParameterSet { seed, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// All values concatenated in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParameterSet::to_flat`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let chunk = flat[offset..offset + t.numel()].to_vec();
                offset += t.numel();
                Tensor::new(t.shape().to_vec(), chunk).map(|t| (n.clone(), t))
            })
            .collect::<Result<_>>()?;
        Ok(ParameterSet {
            seed: self.seed,
            tensors,
        })
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// True when names and shapes match what `spec` declares.
    pub fn matches(&self, spec: &ModelSpec) -> bool {
        let want = spec.tensor_shapes();
        want.len() == self.tensors.len()
            && want
                .iter()
                .zip(&self.tensors)
                .all(|((wn, ws), (n, t))| wn == n && ws.as_slice() == t.shape())
    }
}

/// He-uniform weights (`U(±sqrt(6 / fan_in))`) and zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = rng::stream(seed, 0, Purpose::Init);
    let tensors = spec
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * 9
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            (name, Tensor::from_parts_unchecked(shape, data))
        })
        .collect();
    Ok(ParameterSet { seed, tensors })
}

/// A recorded forward pass: the tape, the logits and one trainable leaf per
/// parameter tensor (in [`ParameterSet`] order).
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }
}

/// Runs `batch` through the model, recording every primitive for backward.
pub fn forward(params: &ParameterSet, spec: &ModelSpec, batch: &Tensor) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().map(|t| tape.param(t.clone())).collect();
    let logits = forward_on(&mut tape, &vars, params, spec, batch)?;
    Ok(ForwardPass {
        tape,
        logits,
        params: vars,
    })
}

/// Inference only: no trainable leaves, no gradient bookkeeping.
pub fn predict(params: &ParameterSet, spec: &ModelSpec, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().map(|t| tape.constant(t.clone())).collect();
    let logits = forward_on(&mut tape, &vars, params, spec, batch)?;
    Ok(tape.value(logits).clone())
}

fn forward_on(
    tape: &mut Tape,
    vars: &[Var],
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &Tensor,
) -> Result<Var> {
    if !params.matches(spec) {
        return Err(Error::Shape(format!("parameter set does not match {spec}")));
    }
    let per_example = spec.input_shape();
    let rows = batch.rows();
    let want: usize = per_example.iter().product();
    let shape_ok = match spec.family {
        Family::Mlp { .. } => batch.rank() >= 2 && batch.row_len() == want,
        Family::PlainCnn { .. } => batch.shape().get(1..) == Some(per_example.as_slice()),
    };
    if !shape_ok {
        return Err(Error::Shape(format!(
            "{spec} expects per-example input {per_example:?}, batch has shape {:?}",
            batch.shape()
        )));
    }
    let mut x = tape.constant(batch.clone());
    if matches!(spec.family, Family::Mlp { .. }) && batch.rank() != 2 {
        x = tape.reshape(x, vec![rows, want])?;
    }
    let mut next = vars.iter().copied();
    let mut take = || next.next().expect("tensor_shapes and layers agree");
    for layer in spec.layers() {
        x = match layer {
            Layer::Conv { .. } => {
                let (w, b) = (take(), take());
                let y = tape.conv3x3(x, w, b)?;
                tape.relu(y)?
            }
            Layer::Pool => tape.max_pool2(x)?,
            Layer::Affine { relu, .. } => {
                if tape.value(x).rank() != 2 {
                    x = tape.flatten(x)?;
                }
                let (w, b) = (take(), take());
                let y = tape.affine(x, w, b)?;
                if relu {
                    tape.relu(y)?
                } else {
                    y
                }
            }
        };
    }
    Ok(x)
}

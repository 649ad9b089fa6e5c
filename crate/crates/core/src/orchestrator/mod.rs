//! Stage-by-stage training of a distillation ladder.

mod checkpoint;
mod plan;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use plan::{run_plan, DistillationPlan, PlanAbort, PlanRunner, StagePlan};

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{dgkd_total_loss, sample_gates, DistillConfig, GateMask, Lambda};
use crate::metrics::{correct_count, ErrorSet};
use crate::rng::{self, Purpose, RngState};
use crate::tensor::{OptimizerState, SgdMomentum, Tensor};
use crate::zoo::{build_model, forward, parameter_count, predict, ModelSpec, ParameterSet};

/// How later stages are guided by earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Teacher straight to student; assistants are skipped.
    DirectKd,
    /// Each model learns from the one directly above it.
    Chain,
    /// Each model learns from every model above it.
    Dense,
    /// Dense, with `drop_trials` sources dropped per mini-batch.
    DenseStochastic,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [
        GuidanceMode::DirectKd,
        GuidanceMode::Chain,
        GuidanceMode::Dense,
        GuidanceMode::DenseStochastic,
    ];
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::DirectKd => "direct_kd",
            GuidanceMode::Chain => "chain",
            GuidanceMode::Dense => "dense",
            GuidanceMode::DenseStochastic => "dense_stochastic",
        })
    }
}

/// Distillation knobs for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDistill {
    pub lambda: Lambda,
    pub temperature: f64,
    pub drop_trials: usize,
    pub normalize: bool,
}

impl Default for StageDistill {
    fn default() -> Self {
        StageDistill {
            lambda: Lambda::Shared(0.5),
            temperature: 4.0,
            drop_trials: 1,
            normalize: false,
        }
    }
}

impl StageDistill {
    pub fn config(&self, n_sources: usize) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lambda: self.lambda.clone(),
            n_sources,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// ×0.1 at half and at three quarters of the epochs.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Random crop + flip on image inputs.
    pub augment: bool,
    /// Precompute trainer logits once per stage; ignored when augmenting.
    pub cache_trainer_logits: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 160,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Constant,
            augment: false,
            cache_trainer_logits: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay < 0.0
        {
            return Err(Error::Parameter(format!(
                "bad optimizer settings lr={} momentum={} weight_decay={}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step => {
                let drops = [self.epochs / 2, self.epochs * 3 / 4]
                    .iter()
                    .filter(|&&m| epoch >= m)
                    .count();
                self.lr * 0.1f64.powi(drops as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub label: String,
    pub stage_index: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    /// Shuffle stream position after the last epoch.
    pub rng_state: RngState,
    pub final_top1: f64,
    pub final_train_loss: Option<f64>,
}

/// A trained model plus how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_index: usize,
    pub label: String,
    pub depth: usize,
    pub parameter_count: usize,
    pub trainers: Vec<String>,
    pub drop_trials: usize,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_test_top1: Vec<f64>,
    pub final_top1: f64,
    pub correct: usize,
    pub test_size: usize,
    pub errors: ErrorSet,
}

/// Logits of a frozen model; no tape is kept and nothing is mutated.
pub fn trainer_logits(checkpoint: &Checkpoint, batch: &Tensor) -> Result<Tensor> {
    predict(&checkpoint.params, &checkpoint.spec, batch)
}

/// Inference in fixed-size chunks.
pub fn logits_chunked(
    params: &ParameterSet,
    spec: &ModelSpec,
    inputs: &Tensor,
    chunk: usize,
) -> Result<Tensor> {
    let n = inputs.rows();
    let parts = (0..n)
        .step_by(chunk.max(1))
        .map(|start| {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            predict(params, spec, &inputs.select_rows(&idx)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

const EVAL_CHUNK: usize = 512;

/// Loss value and parameter gradients on one mini-batch.
///
/// With no trainers this is plain cross-entropy; otherwise the dense loss
/// over `trainer_logits` (teacher first) with the given gates.
pub fn minibatch_loss(
    params: &ParameterSet,
    spec: &ModelSpec,
    batch: &Tensor,
    labels: &[usize],
    trainer_logits: &[Tensor],
    cfg: Option<&DistillConfig>,
    gates: &GateMask,
) -> Result<(f64, Vec<Tensor>)> {
    let mut pass = forward(params, spec, batch)?;
    let loss = match cfg {
        None => pass.tape.cross_entropy(pass.logits, labels)?,
        Some(cfg) => {
            let refs: Vec<&Tensor> = trainer_logits.iter().collect();
            dgkd_total_loss(&mut pass.tape, pass.logits, &refs, labels, cfg, gates)?
        }
    };
    let value = pass.tape.value(loss).item().expect("scalar loss");
    let mut grads = pass.tape.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
        .collect();
    Ok((value, grads))
}

/// Everything one stage needs besides the dataset.
struct StageJob<'a> {
    spec: &'a ModelSpec,
    label: String,
    stage_index: usize,
    trainers: &'a [&'a Checkpoint],
    distill: Option<(&'a StageDistill, bool)>,
    hyper: &'a TrainHyper,
    seed: u64,
}

/// Trains `spec` from labels only.
pub fn train_supervised(
    spec: &ModelSpec,
    dataset: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Checkpoint, StageReport)> {
    run_stage(
        StageJob {
            spec,
            label: format!("T{}", spec.depth),
            stage_index: 0,
            trainers: &[],
            distill: None,
            hyper,
            seed,
        },
        dataset,
    )
}

/// Trains `spec` against frozen trainers (highest capacity first) with the
/// dense loss. Chain and direct modes take exactly one trainer; in
/// `DenseStochastic` mode a fresh gate mask is drawn for every mini-batch.
pub fn train_with_trainers(
    spec: &ModelSpec,
    trainers: &[&Checkpoint],
    mode: GuidanceMode,
    distill: &StageDistill,
    dataset: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Checkpoint, StageReport)> {
    let label = format!("S{}", spec.depth);
    train_stage_with(
        spec, label, 1, trainers, mode, distill, dataset, hyper, seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_stage_with(
    spec: &ModelSpec,
    label: String,
    stage_index: usize,
    trainers: &[&Checkpoint],
    mode: GuidanceMode,
    distill: &StageDistill,
    dataset: &Dataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Checkpoint, StageReport)> {
    if trainers.is_empty() {
        return Err(Error::Parameter(
            "a guided stage needs at least one trainer".into(),
        ));
    }
    if matches!(mode, GuidanceMode::Chain | GuidanceMode::DirectKd) && trainers.len() != 1 {
        return Err(Error::Parameter(format!(
            "{mode} mode takes exactly one trainer, got {}",
            trainers.len()
        )));
    }
    let own = parameter_count(spec);
    for t in trainers {
        let theirs = parameter_count(&t.spec);
        if theirs <= own {
            return Err(Error::Capacity(format!(
                "trainer {} ({theirs} params) is not larger than trainee {spec} ({own} params)",
                t.meta.label
            )));
        }
    }
    let stochastic = mode == GuidanceMode::DenseStochastic;
    run_stage(
        StageJob {
            spec,
            label,
            stage_index,
            trainers,
            distill: Some((distill, stochastic)),
            hyper,
            seed,
        },
        dataset,
    )
}

fn run_stage(job: StageJob<'_>, dataset: &Dataset) -> Result<(Checkpoint, StageReport)> {
    let StageJob {
        spec,
        label,
        stage_index,
        trainers,
        distill,
        hyper,
        seed,
    } = job;
    hyper.validate()?;
    if spec.num_classes != dataset.num_classes() {
        return Err(Error::Shape(format!(
            "{spec} has {} outputs, dataset has {} classes",
            spec.num_classes,
            dataset.num_classes()
        )));
    }
    let n_sources = trainers.len();
    let cfg = distill.map(|(d, _)| d.config(n_sources));
    if let Some(cfg) = &cfg {
        cfg.validate()?;
    }
    let drop_trials = match distill {
        Some((d, true)) => {
            if d.drop_trials >= n_sources {
                return Err(Error::Parameter(format!(
                    "cannot drop {} of {n_sources} trainer sources",
                    d.drop_trials
                )));
            }
            d.drop_trials
        }
        _ => 0,
    };

    let mut params = build_model(spec, seed)?;
    let shapes: Vec<Vec<usize>> = params.tensors().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = SgdMomentum::new(
        OptimizerState {
            lr: hyper.lr,
            momentum: hyper.momentum,
            weight_decay: hyper.weight_decay,
        },
        &shape_refs,
    );
    let mut shuffle_rng = rng::stream(seed, 0, Purpose::Shuffle);
    let mut gate_rng = rng::stream(seed, 0, Purpose::Gates);
    let mut augment_rng = rng::stream(seed, 0, Purpose::Augment);

    let train = &dataset.train;
    let augment = hyper.augment && train.inputs.rank() == 4;
    let cached: Option<Vec<Tensor>> = if hyper.cache_trainer_logits && !augment {
        Some(
            trainers
                .iter()
                .map(|t| logits_chunked(&t.params, &t.spec, &train.inputs, EVAL_CHUNK))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_train_loss = Vec::with_capacity(hyper.epochs);
    let mut epoch_test_top1 = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        opt.hyper.lr = hyper.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let (mut x, y) = train.batch(chunk)?;
            if augment {
                x = augment_batch(&x, &mut augment_rng)?;
            }
            let targets: Vec<Tensor> = match &cached {
                Some(all) => all
                    .iter()
                    .map(|t| t.select_rows(chunk))
                    .collect::<Result<_>>()?,
                None => trainers
                    .iter()
                    .map(|t| trainer_logits(t, &x))
                    .collect::<Result<_>>()?,
            };
            let gates = if drop_trials > 0 {
                sample_gates(n_sources, drop_trials, &mut gate_rng)?
            } else {
                GateMask::all_active(n_sources.max(1))
            };
            let (loss, grads) =
                minibatch_loss(&params, spec, &x, &y, &targets, cfg.as_ref(), &gates).map_err(
                    |e| match e {
                        Error::Numeric(msg) => Error::Divergence(format!(
                            "stage {label}, epoch {epoch}, batch {b}: {msg}"
                        )),
                        other => other,
                    },
                )?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {label}, epoch {epoch}, batch {b}: loss {loss}"
                )));
            }
            total += loss * chunk.len() as f64;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut params.tensors_mut(), &grad_refs)?;
        }
        epoch_train_loss.push(total / train.len() as f64);
        let logits = logits_chunked(&params, spec, &dataset.test.inputs, EVAL_CHUNK)?;
        epoch_test_top1
            .push(correct_count(&logits, &dataset.test.labels)? as f64 / dataset.test.len() as f64);
    }

    let logits = logits_chunked(&params, spec, &dataset.test.inputs, EVAL_CHUNK)?;
    let errors = ErrorSet::from_logits(&dataset.id, &label, &logits, &dataset.test.labels)?;
    let test_size = dataset.test.len();
    let correct = test_size - errors.len();
    let final_top1 = correct as f64 / test_size as f64;
    let trainer_labels = trainers.iter().map(|t| t.meta.label.clone()).collect();
    let report = StageReport {
        stage_index,
        label: label.clone(),
        depth: spec.depth,
        parameter_count: parameter_count(spec),
        trainers: trainer_labels,
        drop_trials,
        epoch_train_loss: epoch_train_loss.clone(),
        epoch_test_top1,
        final_top1,
        correct,
        test_size,
        errors,
    };
    let checkpoint = Checkpoint {
        spec: spec.clone(),
        params,
        meta: CheckpointMeta {
            label,
            stage_index,
            seed,
            epochs_completed: hyper.epochs,
            rng_state: RngState::capture(&shuffle_rng),
            final_top1,
            final_train_loss: epoch_train_loss.last().copied(),
        },
    };
    Ok((checkpoint, report))
}

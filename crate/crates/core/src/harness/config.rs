use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_dataset, load_cifar_binary, load_idx_dataset, Dataset, LabeledDataset,
    SyntheticKind, SyntheticParams,
};
use crate::error::{Error, Result};
use crate::metrics::OverlapDenominator;
use crate::orchestrator::{DistillationPlan, GuidanceMode, LrSchedule, StageDistill, TrainHyper};
use crate::zoo::{Family, ModelSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Top-level experiment description; one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub plans: Vec<PlanConfig>,
    pub seeds: Vec<u64>,
    /// Drop counts for `sweep-t`; empty means every admissible value.
    #[serde(default)]
    pub sweep_t: Vec<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub overlap_denominator: OverlapDenominator,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    SyntheticSpiral(SyntheticConfig),
    SyntheticBlobs(SyntheticConfig),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
        #[serde(default)]
        normalize: bool,
        #[serde(default)]
        augment: bool,
    },
    CifarBinary {
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        num_classes: usize,
        #[serde(default)]
        normalize: bool,
        #[serde(default)]
        augment: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Generate a fresh dataset per run seed; otherwise use `data_seed`.
    #[serde(default = "default_true")]
    pub follow_run_seed: bool,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub normalize: bool,
}

fn default_classes() -> usize {
    10
}
fn default_train_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    200
}
fn default_noise() -> f64 {
    0.2
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub family: Family,
    /// Teacher first.
    pub depths: Vec<usize>,
    /// Taken from the dataset when omitted.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub ladder_index: usize,
    pub distill: StageDistill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_true")]
    pub cache_trainer_logits: bool,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: LrSchedule::Constant,
            cache_trainer_logits: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub name: String,
    pub ladder: LadderConfig,
    #[serde(default = "default_mode")]
    pub mode: GuidanceMode,
    #[serde(default)]
    pub distill: StageDistill,
    #[serde(default)]
    pub stage_overrides: Vec<StageOverride>,
    #[serde(default)]
    pub stochastic_for_tas: bool,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_mode() -> GuidanceMode {
    GuidanceMode::Dense
}

impl DatasetConfig {
    pub fn augment(&self) -> bool {
        match self {
            DatasetConfig::Idx { augment, .. } | DatasetConfig::CifarBinary { augment, .. } => {
                *augment
            }
            _ => false,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::SyntheticSpiral(synthetic)
            | DatasetConfig::SyntheticBlobs(synthetic) => synthetic.classes,
            DatasetConfig::Idx { num_classes, .. }
            | DatasetConfig::CifarBinary { num_classes, .. } => *num_classes,
        }
    }

    /// Whether each run seed gets its own dataset.
    pub fn per_seed(&self) -> bool {
        match self {
            DatasetConfig::SyntheticSpiral(synthetic)
            | DatasetConfig::SyntheticBlobs(synthetic) => synthetic.follow_run_seed,
            _ => false,
        }
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetConfig::CifarBinary {
                train_files,
                test_files,
                ..
            } => train_files
                .iter_mut()
                .chain(test_files.iter_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Loads or generates the dataset for one run seed.
    pub fn build(&self, run_seed: u64) -> Result<Dataset> {
        let mut dataset = match self {
            DatasetConfig::SyntheticSpiral(synthetic) => {
                synthetic.generate(SyntheticKind::Spiral, run_seed)?
            }
            DatasetConfig::SyntheticBlobs(synthetic) => {
                synthetic.generate(SyntheticKind::Blobs, run_seed)?
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
                ..
            } => {
                let train =
                    with_classes(load_idx_dataset(train_images, train_labels)?, *num_classes)?;
                let test = with_classes(load_idx_dataset(test_images, test_labels)?, *num_classes)?;
                Dataset::new(format!("idx:{}", file_stem(train_images)), train, test)?
            }
            DatasetConfig::CifarBinary {
                train_files,
                test_files,
                num_classes,
                ..
            } => {
                let train = load_cifar_binary(train_files, *num_classes)?;
                let test = load_cifar_binary(test_files, *num_classes)?;
                let stem = train_files
                    .first()
                    .map(|p| file_stem(p))
                    .unwrap_or_default();
                Dataset::new(format!("cifar{num_classes}:{stem}"), train, test)?
            }
        };
        let normalize = match self {
            DatasetConfig::SyntheticSpiral(synthetic)
            | DatasetConfig::SyntheticBlobs(synthetic) => synthetic.normalize,
            DatasetConfig::Idx { normalize, .. } | DatasetConfig::CifarBinary { normalize, .. } => {
                *normalize
            }
        };
        if normalize {
            dataset.normalize()?;
            dataset.id.push_str("-norm");
        }
        Ok(dataset)
    }
}

impl SyntheticConfig {
    fn generate(&self, kind: SyntheticKind, run_seed: u64) -> Result<Dataset> {
        let seed = if self.follow_run_seed {
            run_seed
        } else {
            self.data_seed
        };
        generate_synthetic_dataset(
            kind,
            &SyntheticParams {
                classes: self.classes,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                noise: self.noise,
            },
            seed,
        )
    }
}

fn with_classes(d: LabeledDataset, num_classes: usize) -> Result<LabeledDataset> {
    LabeledDataset::new(d.inputs, d.labels, num_classes)
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl PlanConfig {
    pub fn ladder_specs(&self, dataset_classes: usize) -> Vec<ModelSpec> {
        let classes = self.ladder.num_classes.unwrap_or(dataset_classes);
        self.ladder
            .depths
            .iter()
            .map(|&depth| ModelSpec {
                family: self.ladder.family.clone(),
                depth,
                num_classes: classes,
            })
            .collect()
    }

    pub fn hyper(&self, augment: bool) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule,
            augment,
            cache_trainer_logits: t.cache_trainer_logits,
        }
    }

    pub fn to_plan(&self, dataset: &DatasetConfig, seed: u64) -> DistillationPlan {
        DistillationPlan {
            name: self.name.clone(),
            ladder: self.ladder_specs(dataset.num_classes()),
            mode: self.mode,
            distill: self.distill.clone(),
            stage_overrides: self
                .stage_overrides
                .iter()
                .map(|o| (o.ladder_index, o.distill.clone()))
                .collect(),
            hyper: self.hyper(dataset.augment()),
            seed,
            stochastic_for_tas: self.stochastic_for_tas,
        }
    }
}

impl ExperimentConfig {
    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.plans.is_empty() {
            return Err(Error::config("plans", "at least one plan is required"));
        }
        let mut names = HashSet::new();
        for (i, plan) in self.plans.iter().enumerate() {
            if plan.name.is_empty() || plan.name.contains(['/', '\\']) {
                return Err(Error::config(
                    format!("plans[{i}].name"),
                    "must be a non-empty file-safe name",
                ));
            }
            if !names.insert(plan.name.as_str()) {
                return Err(Error::config(
                    format!("plans[{i}].name"),
                    format!("duplicate plan name {}", plan.name),
                ));
            }
            if plan.ladder.depths.is_empty() {
                return Err(Error::config(
                    format!("plans[{i}].ladder.depths"),
                    "empty ladder",
                ));
            }
            let specs = plan.ladder_specs(self.dataset.num_classes());
            for spec in &specs {
                spec.validate()?;
            }
            plan.to_plan(&self.dataset, self.seeds[0]).validate()?;
        }
        for (i, p) in self.dataset.clone().paths_mut().into_iter().enumerate() {
            if !p.is_file() {
                return Err(Error::config(
                    format!("dataset.path[{i}]"),
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        if let DatasetConfig::CifarBinary {
            train_files,
            test_files,
            ..
        } = &self.dataset
        {
            if train_files.is_empty() || test_files.is_empty() {
                return Err(Error::config(
                    "dataset",
                    "cifar_binary needs train and test files",
                ));
            }
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let classes = self.dataset.num_classes();
        for plan in &mut self.plans {
            plan.ladder.num_classes.get_or_insert(classes);
        }
        for p in self.dataset.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    /// The resolved configuration with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses JSON text; relative paths are taken against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string())
    })?;
    cfg.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = fs::canonicalize(parent).map_err(|e| Error::io(parent, e))?;
    parse_config_str(&text, &base)
}

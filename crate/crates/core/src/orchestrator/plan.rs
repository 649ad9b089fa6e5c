use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    save_checkpoint, train_stage_with, train_supervised, Checkpoint, GuidanceMode, StageDistill,
    StageReport, TrainHyper,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{overlap_matrix, OverlapDenominator, PlanDescriptor, PlanReport};
use crate::rng;
use crate::zoo::{capacity_order, ModelSpec};

/// A ladder plus how to walk it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationPlan {
    pub name: String,
    /// Strictly decreasing capacity: teacher first, student last.
    pub ladder: Vec<ModelSpec>,
    pub mode: GuidanceMode,
    pub distill: StageDistill,
    /// Per-stage replacements of `distill`, keyed by ladder position.
    #[serde(default)]
    pub stage_overrides: Vec<(usize, StageDistill)>,
    pub hyper: TrainHyper,
    pub seed: u64,
    /// Apply stochastic dropping to assistant stages too.
    #[serde(default)]
    pub stochastic_for_tas: bool,
}

/// One executed stage: which ladder member, taught by which earlier stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub ladder_index: usize,
    /// Positions in the executed stage list, highest capacity first.
    pub trainers: Vec<usize>,
    pub stochastic: bool,
}

impl DistillationPlan {
    pub fn validate(&self) -> Result<()> {
        let ordered = capacity_order(&self.ladder)?;
        if ordered != self.ladder {
            let pos = self
                .ladder
                .iter()
                .zip(&ordered)
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(Error::Ladder(format!(
                "ladder is not in decreasing capacity order: {} at position {pos} should be {}",
                self.ladder[pos], ordered[pos]
            )));
        }
        self.hyper.validate()?;
        for stage in self.stages().iter().filter(|s| !s.trainers.is_empty()) {
            let d = self.stage_distill(stage.ladder_index);
            d.config(stage.trainers.len()).validate()?;
            if stage.stochastic && d.drop_trials >= stage.trainers.len() {
                return Err(Error::Parameter(format!(
                    "stage {} has {} trainer sources; cannot drop {}",
                    self.label(stage.ladder_index),
                    stage.trainers.len(),
                    d.drop_trials
                )));
            }
        }
        Ok(())
    }

    pub fn stage_distill(&self, ladder_index: usize) -> &StageDistill {
        self.stage_overrides
            .iter()
            .rev()
            .find(|(k, _)| *k == ladder_index)
            .map(|(_, d)| d)
            .unwrap_or(&self.distill)
    }

    /// Executed stages in order. Direct KD keeps only the ends of the ladder.
    pub fn stages(&self) -> Vec<StagePlan> {
        if self.ladder.is_empty() {
            return Vec::new();
        }
        let last = self.ladder.len() - 1;
        let members: Vec<usize> = match self.mode {
            GuidanceMode::DirectKd if last > 0 => vec![0, last],
            _ => (0..=last).collect(),
        };
        members
            .iter()
            .enumerate()
            .map(|(pos, &ladder_index)| {
                let trainers = match (pos, self.mode) {
                    (0, _) => vec![],
                    (_, GuidanceMode::Chain | GuidanceMode::DirectKd) => vec![pos - 1],
                    _ => (0..pos).collect(),
                };
                let stochastic = self.mode == GuidanceMode::DenseStochastic
                    && pos > 0
                    && (ladder_index == last || self.stochastic_for_tas);
                StagePlan {
                    ladder_index,
                    trainers,
                    stochastic,
                }
            })
            .collect()
    }

    /// `T` for the head, `S` for the tail, `A` for assistants, plus depth.
    pub fn label(&self, ladder_index: usize) -> String {
        let role = if ladder_index == 0 {
            "T"
        } else if ladder_index == self.ladder.len() - 1 {
            "S"
        } else {
            "A"
        };
        format!("{role}{}", self.ladder[ladder_index].depth)
    }

    pub fn path(&self) -> String {
        self.stages()
            .iter()
            .map(|s| self.label(s.ladder_index))
            .collect::<Vec<_>>()
            .join("→")
    }

    /// Number of assistants on the executed path.
    pub fn n_assistants(&self) -> usize {
        self.stages().len().saturating_sub(2)
    }

    pub fn descriptor(&self) -> PlanDescriptor {
        let student = self.ladder.len().saturating_sub(1);
        let drop_trials = if self.mode == GuidanceMode::DenseStochastic {
            self.stage_distill(student).drop_trials
        } else {
            0
        };
        PlanDescriptor {
            name: self.name.clone(),
            path: self.path(),
            mode: self.mode,
            n: self.n_assistants(),
            seed: self.seed,
            drop_trials,
        }
    }
}

/// A plan that failed part-way; completed stages are kept.
#[derive(Debug)]
pub struct PlanAbort {
    pub partial: Box<PlanReport>,
    pub error: Error,
}

impl fmt::Display for PlanAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "plan {} aborted after {} stage(s): {}",
            self.partial.descriptor.name,
            self.partial.stages.len(),
            self.error
        )
    }
}

impl std::error::Error for PlanAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<PlanAbort> for Error {
    fn from(abort: PlanAbort) -> Self {
        abort.error
    }
}

/// Executes plans, reusing stages whose full recipe has been trained before.
///
/// Training is deterministic, so a stage keyed by its spec, its trainers'
/// keys, its distillation settings, hyperparameters, seed and dataset
/// always produces the same checkpoint.
#[derive(Default)]
pub struct PlanRunner {
    cache: HashMap<String, (Checkpoint, StageReport)>,
    checkpoint_dir: Option<PathBuf>,
    pub denominator: OverlapDenominator,
    pub verbose: bool,
    written: Vec<PathBuf>,
}

impl PlanRunner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Persist every stage checkpoint under `dir/<plan>/seed<seed>/`.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Files written so far.
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn run(
        &mut self,
        plan: &DistillationPlan,
        dataset: &Dataset,
    ) -> Result<PlanReport, PlanAbort> {
        let started = Instant::now();
        let mut partial = PlanReport {
            descriptor: plan.descriptor(),
            stages: Vec::new(),
            overlap_denominator: self.denominator,
            overlap: Vec::new(),
            wall_clock_secs: 0.0,
        };
        if let Err(error) = plan.validate() {
            return Err(PlanAbort {
                partial: Box::new(partial),
                error,
            });
        }
        let mut keys: Vec<String> = Vec::new();
        let mut checkpoints: Vec<Checkpoint> = Vec::new();
        for (pos, stage) in plan.stages().into_iter().enumerate() {
            let result = self.run_stage(plan, dataset, pos, &stage, &keys, &checkpoints);
            match result {
                Ok((key, ckpt, report)) => {
                    keys.push(key);
                    checkpoints.push(ckpt);
                    partial.stages.push(report);
                }
                Err(error) => {
                    partial.wall_clock_secs = started.elapsed().as_secs_f64();
                    partial.overlap =
                        overlap_matrix(&partial.stages, self.denominator).unwrap_or_default();
                    return Err(PlanAbort {
                        partial: Box::new(partial),
                        error,
                    });
                }
            }
        }
        partial.overlap = match overlap_matrix(&partial.stages, self.denominator) {
            Ok(m) => m,
            Err(error) => {
                return Err(PlanAbort {
                    partial: Box::new(partial),
                    error,
                })
            }
        };
        partial.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(partial)
    }

    fn run_stage(
        &mut self,
        plan: &DistillationPlan,
        dataset: &Dataset,
        pos: usize,
        stage: &StagePlan,
        keys: &[String],
        checkpoints: &[Checkpoint],
    ) -> Result<(String, Checkpoint, StageReport)> {
        let spec = &plan.ladder[stage.ladder_index];
        let seed = rng::stage_seed(plan.seed, stage.ladder_index as u64);
        let label = plan.label(stage.ladder_index);
        let distill = plan.stage_distill(stage.ladder_index);
        let trainer_keys: Vec<&str> = stage.trainers.iter().map(|&t| keys[t].as_str()).collect();
        let key = format!(
            "{}|{}|{}|{}|[{}]|{}|{}|{}",
            dataset.id,
            serde_json::to_string(spec).map_err(Error::from)?,
            serde_json::to_string(&plan.hyper).map_err(Error::from)?,
            seed,
            trainer_keys.join(";"),
            if stage.trainers.is_empty() {
                String::new()
            } else {
                serde_json::to_string(distill).map_err(Error::from)?
            },
            stage.stochastic,
            label,
        );

        let (ckpt, mut report) = match self.cache.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                if self.verbose {
                    eprintln!(
                        "[{}] training {label} ({} trainers)",
                        plan.name,
                        stage.trainers.len()
                    );
                }
                let out = if stage.trainers.is_empty() {
                    let (mut c, mut r) = train_supervised(spec, dataset, &plan.hyper, seed)?;
                    c.meta.label.clone_from(&label);
                    r.label.clone_from(&label);
                    r.errors.model_id.clone_from(&label);
                    (c, r)
                } else {
                    let trainers: Vec<&Checkpoint> =
                        stage.trainers.iter().map(|&t| &checkpoints[t]).collect();
                    let mode = if stage.stochastic {
                        GuidanceMode::DenseStochastic
                    } else if stage.trainers.len() == 1 {
                        GuidanceMode::Chain
                    } else {
                        GuidanceMode::Dense
                    };
                    train_stage_with(
                        spec,
                        label.clone(),
                        pos,
                        &trainers,
                        mode,
                        distill,
                        dataset,
                        &plan.hyper,
                        seed,
                    )?
                };
                self.cache.insert(key.clone(), out.clone());
                out
            }
        };
        report.stage_index = pos;
        let mut ckpt = ckpt;
        ckpt.meta.stage_index = pos;
        if let Some(dir) = &self.checkpoint_dir {
            let dir = dir.join(&plan.name).join(format!("seed{}", plan.seed));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("stage{pos}_{label}.dgkd"));
            save_checkpoint(&ckpt, &path)?;
            self.written.push(path);
        }
        Ok((key, ckpt, report))
    }
}

/// Runs one plan without persistence or cross-plan reuse.
pub fn run_plan(plan: &DistillationPlan, dataset: &Dataset) -> Result<PlanReport, PlanAbort> {
    PlanRunner::new().run(plan, dataset)
}

//! Classification and distillation losses, recorded on a [`Tape`] so the
//! student side can be differentiated.
//!
//! Trainer logits are always passed as plain [`Tensor`]s: they are targets,
//! never trained through.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Balancing weight between supervision and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Shared(f64),
    PerSource(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub lambda: Lambda,
    pub n_sources: usize,
    /// Divide the whole dense loss by the number of sources.
    pub normalize: bool,
}

impl DistillConfig {
    pub fn new(temperature: f64, lambda: f64, n_sources: usize) -> Self {
        DistillConfig {
            temperature,
            lambda: Lambda::Shared(lambda),
            n_sources,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.n_sources == 0 {
            return Err(Error::Parameter("need at least one trainer source".into()));
        }
        let lambdas: &[f64] = match &self.lambda {
            Lambda::Shared(l) => std::slice::from_ref(l),
            Lambda::PerSource(ls) => {
                if ls.len() != self.n_sources {
                    return Err(Error::Parameter(format!(
                        "{} per-source lambdas for {} sources",
                        ls.len(),
                        self.n_sources
                    )));
                }
                ls
            }
        };
        if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::Parameter(format!("lambda {l} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Which trainer sources contribute their distillation term this step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateMask {
    bits: Vec<bool>,
    drop_trials: usize,
}

impl GateMask {
    pub fn all_active(n_sources: usize) -> Self {
        GateMask {
            bits: vec![true; n_sources],
            drop_trials: 0,
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Parameter("gate mask has no active source".into()));
        }
        let drop_trials = bits.iter().filter(|&&b| !b).count();
        Ok(GateMask { bits, drop_trials })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn drop_trials(&self) -> usize {
        self.drop_trials
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active(&self, source: usize) -> bool {
        self.bits[source]
    }
}

/// Drops `t` distinct sources chosen uniformly without replacement.
pub fn sample_gates<R: Rng + ?Sized>(n_sources: usize, t: usize, rng: &mut R) -> Result<GateMask> {
    if n_sources == 0 || t >= n_sources {
        return Err(Error::Parameter(format!(
            "cannot drop {t} of {n_sources} sources and keep one"
        )));
    }
    let mut bits = vec![true; n_sources];
    for i in rand::seq::index::sample(rng, n_sources, t) {
        bits[i] = false;
    }
    Ok(GateMask {
        bits,
        drop_trials: t,
    })
}

/// Mean cross-entropy against hard labels.
pub fn cross_entropy_loss(tape: &mut Tape, student: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(student, labels)
}

/// `T² · KL(softmax(trainer/T) ‖ softmax(student/T))`, batch mean.
pub fn distillation_loss(
    tape: &mut Tape,
    student: Var,
    trainer: &Tensor,
    temperature: f64,
) -> Result<Var> {
    tape.soft_target_kl(student, trainer, temperature)
}

/// `(1 − λ)·CE + λ·KD` against a single trainer.
pub fn kd_total_loss(
    tape: &mut Tape,
    student: Var,
    trainer: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.n_sources != 1 {
        return Err(Error::Parameter(format!(
            "single-trainer loss configured with {} sources",
            cfg.n_sources
        )));
    }
    let lambda = match &cfg.lambda {
        Lambda::Shared(l) => *l,
        Lambda::PerSource(ls) => ls[0],
    };
    let ce = cross_entropy_loss(tape, student, labels)?;
    let kd = distillation_loss(tape, student, trainer, cfg.temperature)?;
    let ce = tape.scale(ce, 1.0 - lambda)?;
    let kd = tape.scale(kd, lambda)?;
    tape.add(ce, kd)
}

/// Dense multi-trainer loss.
///
/// With a shared λ: `(n+1)(1 − λ)·CE + λ·Σᵢ bᵢ·KDᵢ`, where `n + 1` is the
/// number of sources (teacher first, then assistants by decreasing
/// capacity). With per-source λᵢ: `Σᵢ [(1 − λᵢ)·CE + λᵢ·bᵢ·KDᵢ]`.
/// Gates only switch distillation terms; supervision is never dropped.
pub fn dgkd_total_loss(
    tape: &mut Tape,
    student: Var,
    trainers: &[&Tensor],
    labels: &[usize],
    cfg: &DistillConfig,
    gates: &GateMask,
) -> Result<Var> {
    cfg.validate()?;
    if trainers.len() != cfg.n_sources || gates.len() != cfg.n_sources {
        return Err(Error::Shape(format!(
            "{} trainers, {} gates, {} configured sources",
            trainers.len(),
            gates.len(),
            cfg.n_sources
        )));
    }
    if !gates.bits().iter().any(|&b| b) {
        return Err(Error::Parameter("gate mask has no active source".into()));
    }
    let sources = cfg.n_sources as f64;
    let ce = cross_entropy_loss(tape, student, labels)?;

    let mut kd_terms = Vec::with_capacity(trainers.len());
    for (i, trainer) in trainers.iter().enumerate() {
        if gates.active(i) {
            kd_terms.push((
                i,
                distillation_loss(tape, student, trainer, cfg.temperature)?,
            ));
        }
    }

    let total = match &cfg.lambda {
        Lambda::Shared(lambda) => {
            let mut kd_sum = kd_terms[0].1;
            for &(_, term) in &kd_terms[1..] {
                kd_sum = tape.add(kd_sum, term)?;
            }
            let ce = tape.scale(ce, sources * (1.0 - lambda))?;
            let kd = tape.scale(kd_sum, *lambda)?;
            tape.add(ce, kd)?
        }
        Lambda::PerSource(lambdas) => {
            let ce_weight: f64 = lambdas.iter().map(|l| 1.0 - l).sum();
            let mut total = tape.scale(ce, ce_weight)?;
            for &(i, term) in &kd_terms {
                let weighted = tape.scale(term, lambdas[i])?;
                total = tape.add(total, weighted)?;
            }
            total
        }
    };
    if cfg.normalize {
        tape.scale(total, 1.0 / sources)
    } else {
        Ok(total)
    }
}

//! Browser demo: temperature-scaled softmax and KD, gate sampling, and a
//! tiny spiral ladder trained in each guidance mode.

use dgkd_core::data::{generate_synthetic_dataset, SyntheticKind, SyntheticParams};
use dgkd_core::losses::{distillation_loss, sample_gates};
use dgkd_core::metrics::argmax;
use dgkd_core::orchestrator::{
    train_supervised, train_with_trainers, trainer_logits, Checkpoint, GuidanceMode, StageDistill,
    TrainHyper,
};
use dgkd_core::rng::{stream, Purpose};
use dgkd_core::tensor::{softmax_with_temperature, Tape, Tensor};
use dgkd_core::zoo::ModelSpec;
use dgkd_core::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_logits(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Parameter(format!("not a number: {s:?}")))
        })
        .collect()
}

/// Softmax of both logit vectors at temperature `t` and the `T²`-scaled KD
/// between them.
pub fn explore_softmax(student: &str, trainer: &str, t: f64) -> Result<Value> {
    let s = parse_logits(student)?;
    let tr = parse_logits(trainer)?;
    if s.len() != tr.len() || s.len() < 2 {
        return Err(Error::Shape(format!(
            "need two logit vectors of equal length ≥ 2, got {} and {}",
            s.len(),
            tr.len()
        )));
    }
    let s = Tensor::new(vec![1, s.len()], s)?;
    let tr = Tensor::new(vec![1, tr.len()], tr)?;
    let mut tape = Tape::new();
    let v = tape.constant(s.clone());
    let kd = distillation_loss(&mut tape, v, &tr, t)?;
    Ok(json!({
        "student": softmax_with_temperature(&s, t)?.data(),
        "trainer": softmax_with_temperature(&tr, t)?.data(),
        "kd": tape.value(kd).item(),
    }))
}

/// How often each of `n` sources is dropped over `samples` draws of `t`.
pub fn gate_frequencies(n: usize, t: usize, samples: usize, seed: u64) -> Result<Value> {
    let mut rng = stream(seed, 0, Purpose::Gates);
    let mut dropped = vec![0usize; n];
    for _ in 0..samples {
        let mask = sample_gates(n, t, &mut rng)?;
        for (i, &on) in mask.bits().iter().enumerate() {
            if !on {
                dropped[i] += 1;
            }
        }
    }
    let freq: Vec<f64> = dropped
        .iter()
        .map(|&c| c as f64 / samples.max(1) as f64)
        .collect();
    Ok(json!({ "dropped": dropped, "frequency": freq, "expected": t as f64 / n as f64 }))
}

/// Trains a three-class spiral ladder (depths 4, 3, 2) in `mode` and returns
/// per-stage accuracy, the test points and the student's decision regions on
/// a `grid`×`grid` lattice over [-1.2, 1.2]².
pub fn train_ladder(mode: &str, epochs: usize, grid: usize, seed: u64) -> Result<Value> {
    let mode: GuidanceMode = serde_json::from_value(Value::String(mode.into()))
        .map_err(|_| Error::Parameter(format!("unknown mode {mode:?}")))?;
    let params = SyntheticParams {
        classes: 3,
        train_per_class: 150,
        test_per_class: 60,
        noise: 0.35,
    };
    let ds = generate_synthetic_dataset(SyntheticKind::Spiral, &params, seed)?;
    let hyper = TrainHyper {
        epochs,
        batch_size: 32,
        lr: 0.05,
        ..Default::default()
    };
    let distill = StageDistill::default();
    let specs: Vec<ModelSpec> = [4, 3, 2]
        .iter()
        .map(|&d| ModelSpec::mlp(d, 2, 24, 3))
        .collect();

    let mut ladder: Vec<Checkpoint> = vec![train_supervised(&specs[0], &ds, &hyper, seed)?.0];
    for (pos, spec) in specs.iter().enumerate().skip(1) {
        let trainers: Vec<&Checkpoint> = match mode {
            GuidanceMode::Chain => vec![&ladder[pos - 1]],
            GuidanceMode::DirectKd if pos + 1 == specs.len() => vec![&ladder[0]],
            GuidanceMode::DirectKd => vec![&ladder[pos - 1]],
            _ => ladder.iter().collect(),
        };
        let stage_mode = match (mode, trainers.len()) {
            (GuidanceMode::DenseStochastic, n) if n > 1 && pos + 1 == specs.len() => mode,
            (_, 1) => GuidanceMode::Chain,
            _ => GuidanceMode::Dense,
        };
        let next = train_with_trainers(
            spec,
            &trainers,
            stage_mode,
            &distill,
            &ds,
            &hyper,
            seed + pos as u64,
        )?
        .0;
        ladder.push(next);
    }

    let steps = grid.max(2);
    let lattice: Vec<Vec<f64>> = (0..steps * steps)
        .map(|k| {
            let at = |i: usize| -1.2 + 2.4 * i as f64 / (steps - 1) as f64;
            vec![at(k % steps), at(k / steps)]
        })
        .collect();
    let logits = trainer_logits(ladder.last().unwrap(), &Tensor::from_rows(&lattice)?)?;
    let regions: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let points: Vec<[f64; 3]> = (0..ds.test.len())
        .map(|i| {
            let r = ds.test.inputs.row(i);
            [r[0], r[1], ds.test.labels[i] as f64]
        })
        .collect();
    Ok(json!({
        "stages": ladder
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let role = match i {
                    0 => "T",
                    _ if i + 1 == ladder.len() => "S",
                    _ => "A",
                };
                json!({"label": format!("{role}{}", c.spec.depth), "top1": c.meta.final_top1})
            })
            .collect::<Vec<_>>(),
        "grid": steps,
        "regions": regions,
        "points": points,
    }))
}

fn js(r: Result<Value>) -> std::result::Result<String, JsError> {
    r.map(|v| v.to_string())
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = exploreSoftmax)]
pub fn explore_softmax_js(
    student: &str,
    trainer: &str,
    t: f64,
) -> std::result::Result<String, JsError> {
    js(explore_softmax(student, trainer, t))
}

#[wasm_bindgen(js_name = gateFrequencies)]
pub fn gate_frequencies_js(
    n: usize,
    t: usize,
    samples: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(gate_frequencies(n, t, samples, seed as u64))
}

#[wasm_bindgen(js_name = trainLadder)]
pub fn train_ladder_js(
    mode: &str,
    epochs: usize,
    grid: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(train_ladder(mode, epochs, grid, seed as u64))
}

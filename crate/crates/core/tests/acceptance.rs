//! Acceptance suite: one PASS/FAIL line per criterion. Run with
//! `cargo test -p dgkd-core --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

use dgkd_core::data::{
    generate_synthetic_dataset, load_cifar_binary, load_idx_dataset, write_cifar_binary,
    write_idx_images, write_idx_labels, SyntheticKind, SyntheticParams, CIFAR_PIXELS,
};
use dgkd_core::harness::{emit_results, parse_config, run_suite, Suite};
use dgkd_core::losses::{
    cross_entropy_loss, dgkd_total_loss, distillation_loss, kd_total_loss, sample_gates,
    DistillConfig, GateMask,
};
use dgkd_core::metrics::PlanReport;
use dgkd_core::orchestrator::{
    decode_checkpoint, encode_checkpoint, run_plan, trainer_logits, DistillationPlan, GuidanceMode,
    StageDistill, TrainHyper,
};
use dgkd_core::rng::{stream, Purpose, StreamRng};
use dgkd_core::tensor::{Tape, Tensor, Var};
use dgkd_core::zoo::{build_model, forward, ModelSpec, ParameterSet};
use dgkd_core::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    println!(
        "[{}] {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn normal_tensor(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum LossKind {
    Kd,
    Ce,
    KdTotal,
    Dense,
}

struct Instance {
    spec: ModelSpec,
    params: ParameterSet,
    x: Tensor,
    labels: Vec<usize>,
    trainers: Vec<Tensor>,
    cfg: DistillConfig,
    gates: GateMask,
}

/// Loss value and its gradient flattened in parameter order.
fn evaluate(kind: LossKind, inst: &Instance, params: &ParameterSet) -> (f64, Vec<f64>) {
    let mut pass = forward(params, &inst.spec, &inst.x).unwrap();
    let tape = &mut pass.tape;
    let s = pass.logits;
    let loss = match kind {
        LossKind::Kd => {
            distillation_loss(tape, s, &inst.trainers[0], inst.cfg.temperature).unwrap()
        }
        LossKind::Ce => cross_entropy_loss(tape, s, &inst.labels).unwrap(),
        LossKind::KdTotal => {
            let cfg = DistillConfig {
                n_sources: 1,
                ..inst.cfg.clone()
            };
            kd_total_loss(tape, s, &inst.trainers[0], &inst.labels, &cfg).unwrap()
        }
        LossKind::Dense => {
            let refs: Vec<&Tensor> = inst.trainers.iter().collect();
            dgkd_total_loss(tape, s, &refs, &inst.labels, &inst.cfg, &inst.gates).unwrap()
        }
    };
    let value = tape.value(loss).item().unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let flat = pass
        .params
        .iter()
        .flat_map(|&v| grads.take(v).unwrap().into_data())
        .collect();
    (value, flat)
}

fn gradient_oracle() -> Outcome {
    let mut rng = stream(2024, 0, Purpose::Init);
    let mut worst_abs = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    let eps = 1e-5;
    for i in 0..100 {
        let b = rng.random_range(1..=8);
        let k = rng.random_range(2..=10);
        let d = rng.random_range(1..=4);
        let spec = ModelSpec::mlp(2, d, 5, k);
        let params = build_model(&spec, i).unwrap();
        let n_sources = rng.random_range(1..=4);
        let t = rng.random_range(0..n_sources);
        let inst = Instance {
            x: normal_tensor(&mut rng, &[b, d], 1.0),
            labels: (0..b).map(|_| rng.random_range(0..k)).collect(),
            trainers: (0..n_sources)
                .map(|_| normal_tensor(&mut rng, &[b, k], 2.0))
                .collect(),
            cfg: DistillConfig {
                temperature: rng.random_range(0.5..8.0),
                lambda: dgkd_core::losses::Lambda::Shared(rng.random_range(0.0..=1.0)),
                n_sources,
                normalize: rng.random_bool(0.5),
            },
            gates: sample_gates(n_sources, t, &mut rng).unwrap(),
            spec,
            params,
        };
        for kind in [
            LossKind::Kd,
            LossKind::Ce,
            LossKind::KdTotal,
            LossKind::Dense,
        ] {
            let analytic = evaluate(kind, &inst, &inst.params).1;
            let flat = inst.params.to_flat();
            for j in 0..flat.len() {
                let mut plus = flat.clone();
                plus[j] += eps;
                let mut minus = flat.clone();
                minus[j] -= eps;
                let fp = evaluate(kind, &inst, &inst.params.with_flat(&plus).unwrap()).0;
                let fm = evaluate(kind, &inst, &inst.params.with_flat(&minus).unwrap()).0;
                let numeric = (fp - fm) / (2.0 * eps);
                let err = (analytic[j] - numeric).abs();
                let rel = err / analytic[j].abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
                checked += 1;
                if err > 1e-8 && rel > 1e-5 {
                    failures += 1;
                }
                worst_abs = worst_abs.max(err);
            }
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{checked} partials over 100 instances × 4 losses, {failures} outside tolerance, max abs err {worst_abs:.2e}"),
    }
}

/// `T² Σ p_T ln(p_T / p_S)` straight from the definition.
fn kl_by_definition(student: &[f64], trainer: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (ps, pt) = (soft(student), soft(trainer));
    t * t
        * pt.iter()
            .zip(&ps)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p / q).ln())
            .sum::<f64>()
}

fn kl_oracle() -> Outcome {
    let mut rng = stream(7, 0, Purpose::Init);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let s = normal_tensor(&mut rng, &[1, k], 3.0);
        let tr = normal_tensor(&mut rng, &[1, k], 3.0);
        for t in [1.0, 2.0, 4.0, 10.0, 20.0] {
            let mut tape = Tape::new();
            let v = tape.constant(s.clone());
            let l = distillation_loss(&mut tape, v, &tr, t).unwrap();
            let got = tape.value(l).item().unwrap();
            worst = worst.max((got - kl_by_definition(s.data(), tr.data(), t)).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("1000 pairs × T∈{{1,2,4,10,20}}, max abs diff {worst:.2e}"),
    }
}

fn reduction_identities() -> Outcome {
    let mut rng = stream(99, 0, Purpose::Init);
    let mut notes = Vec::new();
    let mut ok = true;
    for _ in 0..200 {
        let b = rng.random_range(1..=8);
        let k = rng.random_range(2..=10);
        let z = normal_tensor(&mut rng, &[b, k], 2.0);
        let trainer = normal_tensor(&mut rng, &[b, k], 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let t = rng.random_range(0.5..10.0);
        let lambda = rng.random_range(0.0..1.0);
        let eval = |f: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let s = tape.param(z.clone());
            let l = f(&mut tape, s);
            let v = tape.value(l).item().unwrap();
            let g = tape.backward(l).unwrap().take(s).unwrap();
            (v, g)
        };
        let one = DistillConfig::new(t, lambda, 1);
        let kd3 = eval(&|tp, s| kd_total_loss(tp, s, &trainer, &labels, &one).unwrap());
        let dense1 = eval(&|tp, s| {
            dgkd_total_loss(tp, s, &[&trainer], &labels, &one, &GateMask::all_active(1)).unwrap()
        });
        ok &= kd3 == dense1;
        let zero = DistillConfig::new(t, 0.0, 1);
        let ce = eval(&|tp, s| cross_entropy_loss(tp, s, &labels).unwrap());
        ok &= eval(&|tp, s| kd_total_loss(tp, s, &trainer, &labels, &zero).unwrap()) == ce;
        let full = DistillConfig::new(t, 1.0, 1);
        let kd = eval(&|tp, s| distillation_loss(tp, s, &trainer, t).unwrap());
        ok &= eval(&|tp, s| kd_total_loss(tp, s, &trainer, &labels, &full).unwrap()) == kd;
    }
    notes.push(format!(
        "loss identities {}",
        if ok { "bit-exact" } else { "differ" }
    ));

    let ds = generate_synthetic_dataset(
        SyntheticKind::Spiral,
        &SyntheticParams {
            classes: 4,
            train_per_class: 100,
            test_per_class: 50,
            noise: 0.2,
        },
        3,
    )
    .unwrap();
    let plan = |depths: &[usize], mode: GuidanceMode, t: usize| DistillationPlan {
        name: mode.to_string(),
        ladder: depths
            .iter()
            .map(|&d| ModelSpec::mlp(d, 2, 16, 4))
            .collect(),
        mode,
        distill: StageDistill {
            drop_trials: t,
            ..Default::default()
        },
        stage_overrides: vec![],
        hyper: TrainHyper {
            epochs: 3,
            batch_size: 32,
            lr: 0.05,
            ..Default::default()
        },
        seed: 5,
        stochastic_for_tas: false,
    };
    let chain = run_plan(&plan(&[4, 2], GuidanceMode::Chain, 1), &ds).unwrap();
    let dense = run_plan(&plan(&[4, 2], GuidanceMode::Dense, 1), &ds).unwrap();
    let two = chain.stages == dense.stages && chain.overlap == dense.overlap;
    notes.push(format!("2-model chain≡dense {two}"));
    let d4 = run_plan(&plan(&[5, 4, 3, 2], GuidanceMode::Dense, 1), &ds).unwrap();
    let s0 = run_plan(&plan(&[5, 4, 3, 2], GuidanceMode::DenseStochastic, 0), &ds).unwrap();
    let t0 = d4.stages == s0.stages;
    notes.push(format!("t=0≡dense {t0}"));
    Outcome {
        pass: ok && two && t0,
        detail: notes.join(", "),
    }
}

fn gate_distribution() -> Outcome {
    let mut rng = stream(1, 0, Purpose::Gates);
    let mut dropped = [0usize; 4];
    for _ in 0..10_000 {
        let g = sample_gates(4, 1, &mut rng).unwrap();
        for (i, &b) in g.bits().iter().enumerate() {
            if !b {
                dropped[i] += 1;
            }
        }
    }
    let freqs: Vec<f64> = dropped.iter().map(|&c| c as f64 / 10_000.0).collect();
    let in_band = freqs.iter().all(|f| (0.23..=0.27).contains(f));
    let single = (0..10_000).all(|_| {
        sample_gates(4, 3, &mut rng)
            .unwrap()
            .bits()
            .iter()
            .filter(|&&b| b)
            .count()
            == 1
    });
    Outcome {
        pass: in_band && single,
        detail: format!("t=1 drop freqs {freqs:?}; t=3 exactly one active: {single}"),
    }
}

struct Experiment {
    reports: Vec<PlanReport>,
    seeds: Vec<u64>,
    secs: f64,
}

impl Experiment {
    fn student(&self, mode: GuidanceMode, seed: u64) -> f64 {
        self.find(mode, seed).student().unwrap().final_top1
    }

    fn overlap(&self, mode: GuidanceMode, seed: u64) -> f64 {
        self.find(mode, seed).mean_adjacent_overlap().unwrap()
    }

    fn find(&self, mode: GuidanceMode, seed: u64) -> &PlanReport {
        self.reports
            .iter()
            .find(|r| r.descriptor.mode == mode && r.descriptor.seed == seed)
            .unwrap()
    }

    fn mean(&self, mode: GuidanceMode) -> f64 {
        self.seeds
            .iter()
            .map(|&s| self.student(mode, s))
            .sum::<f64>()
            / self.seeds.len() as f64
    }
}

fn run_experiment() -> Experiment {
    let start = Instant::now();
    let cfg = parse_config(&configs().join("spiral10.json")).unwrap();
    let reports = run_suite(&cfg, Suite::CompareModes, None, false)
        .map_err(|(_, e)| e)
        .unwrap()
        .reports;
    Experiment {
        reports,
        seeds: cfg.seeds.clone(),
        secs: start.elapsed().as_secs_f64(),
    }
}

fn directional(exp: &Experiment) -> Outcome {
    let (dense, chain, direct) = (
        exp.mean(GuidanceMode::Dense),
        exp.mean(GuidanceMode::Chain),
        exp.mean(GuidanceMode::DirectKd),
    );
    let wins = exp
        .seeds
        .iter()
        .filter(|&&s| exp.student(GuidanceMode::Dense, s) > exp.student(GuidanceMode::Chain, s))
        .count();
    let pass = dense - chain >= -0.005 && dense - direct >= -0.005 && wins >= 3 && exp.secs < 900.0;
    Outcome {
        pass,
        detail: format!(
            "student top-1 dense {:.2}% chain {:.2}% direct {:.2}%; dense beats chain on {wins}/{} seeds; suite {:.0}s",
            dense * 100.0,
            chain * 100.0,
            direct * 100.0,
            exp.seeds.len(),
            exp.secs
        ),
    }
}

fn avalanche(exp: &Experiment) -> Outcome {
    let per_seed: Vec<(f64, f64)> = exp
        .seeds
        .iter()
        .map(|&s| {
            (
                exp.overlap(GuidanceMode::Chain, s),
                exp.overlap(GuidanceMode::Dense, s),
            )
        })
        .collect();
    let count = per_seed.iter().filter(|(c, d)| c >= d).count();
    let shown: Vec<String> = per_seed
        .iter()
        .map(|(c, d)| format!("{c:.3}/{d:.3}"))
        .collect();
    Outcome {
        pass: count >= 3,
        detail: format!(
            "chain ≥ dense adjacent overlap on {count}/{} seeds (chain/dense: {})",
            exp.seeds.len(),
            shown.join(" ")
        ),
    }
}

fn stochastic(exp: &Experiment) -> Outcome {
    let (s, d) = (
        exp.mean(GuidanceMode::DenseStochastic),
        exp.mean(GuidanceMode::Dense),
    );
    Outcome {
        pass: s - d >= -0.005,
        detail: format!(
            "dense_stochastic t=1 {:.2}% vs dense {:.2}%",
            s * 100.0,
            d * 100.0
        ),
    }
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut cfg = parse_config(&configs().join("minimal.json")).unwrap();
    cfg.seeds = vec![0, 1];
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let res = run_suite(&cfg, Suite::CompareModes, None, false)
            .map_err(|(_, e)| e)
            .unwrap();
        emit_results(&res.reports, Some(&cfg), &out, &[]).unwrap();
        bytes.push(
            ["stages.csv", "summary.csv"]
                .map(|f| fs::read(out.join(f)).unwrap())
                .concat(),
        );
    }
    let tables = bytes[0] == bytes[1];

    let spec = ModelSpec::mlp(4, 2, 16, 3);
    let ckpt = dgkd_core::orchestrator::train_supervised(
        &spec,
        &cfg.dataset.build(0).unwrap(),
        &TrainHyper {
            epochs: 2,
            batch_size: 16,
            lr: 0.05,
            ..Default::default()
        },
        3,
    )
    .unwrap()
    .0;
    let path = dir.path().join("t.dgkd");
    dgkd_core::orchestrator::save_checkpoint(&ckpt, &path).unwrap();
    let back = dgkd_core::orchestrator::load_checkpoint(&path).unwrap();
    let x = Tensor::from_rows(&[vec![0.1, 0.9], vec![-0.4, 0.3], vec![0.7, -0.7]]).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_logits =
        bits(&trainer_logits(&ckpt, &x).unwrap()) == bits(&trainer_logits(&back, &x).unwrap());
    let same_bytes = encode_checkpoint(&back).unwrap() == fs::read(&path).unwrap();
    let same_params = back == ckpt && decode_checkpoint(&fs::read(&path).unwrap()).unwrap() == ckpt;
    Outcome {
        pass: tables && same_logits && same_bytes && same_params,
        detail: format!(
            "CSV tables identical across runs: {tables}; checkpoint reload params {same_params}, logits {same_logits}, re-encode {same_bytes}"
        ),
    }
}

fn loaders() -> Outcome {
    let dir = TempDir::new().unwrap();
    let p = |n: &str| dir.path().join(n);
    let be = |v: u32| v.to_be_bytes();
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11 % 256) as u8).collect();
    let img = [&be(0x803)[..], &be(2), &be(3), &be(4), &pixels].concat();
    let lab = [&be(0x801)[..], &be(2), &[5, 2]].concat();
    fs::write(p("img"), &img).unwrap();
    fs::write(p("lab"), &lab).unwrap();
    let ds = load_idx_dataset(&p("img"), &p("lab")).unwrap();
    let back: Vec<u8> = ds
        .inputs
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    write_idx_images(&p("img2"), 3, 4, &back).unwrap();
    write_idx_labels(&p("lab2"), &[5, 2]).unwrap();
    let idx_rt = fs::read(p("img2")).unwrap() == img && fs::read(p("lab2")).unwrap() == lab;

    let mut rec = vec![7u8];
    rec.extend((0..CIFAR_PIXELS).map(|i| (i % 256) as u8));
    let mut other: Vec<u8> = rec.iter().map(|b| 255 - b).collect();
    other[0] = 3;
    let two = [rec.clone(), other].concat();
    fs::write(p("c10"), &two).unwrap();
    let c = load_cifar_binary(&[p("c10")], 10).unwrap();
    let back: Vec<u8> = c
        .inputs
        .data()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    let labels: Vec<(u8, u8)> = c.labels.iter().map(|&l| (0, l as u8)).collect();
    write_cifar_binary(&p("c10b"), 10, &labels, &back).unwrap();
    let cifar_rt = fs::read(p("c10b")).unwrap() == two;

    let mut typed = 0;
    let mut cases = 0;
    let mut expect = |ok: bool| {
        cases += 1;
        typed += ok as usize;
    };
    fs::write(
        p("bad_magic"),
        [&be(0)[..], &be(2), &be(3), &be(4), &pixels].concat(),
    )
    .unwrap();
    expect(matches!(
        load_idx_dataset(&p("bad_magic"), &p("lab")),
        Err(Error::BadMagic { .. })
    ));
    fs::write(
        p("three"),
        [&be(0x803)[..], &be(3), &be(1), &be(1), &[1, 2, 3]].concat(),
    )
    .unwrap();
    expect(matches!(
        load_idx_dataset(&p("three"), &p("lab")),
        Err(Error::CountMismatch { .. })
    ));
    fs::write(p("short"), &img[..img.len() - 1]).unwrap();
    expect(matches!(
        load_idx_dataset(&p("short"), &p("lab")),
        Err(Error::Truncated { .. })
    ));
    let mut long = rec.clone();
    long.push(0);
    fs::write(p("long"), &long).unwrap();
    expect(matches!(
        load_cifar_binary(&[p("long")], 10),
        Err(Error::RecordSize { .. })
    ));
    let mut bad_label = rec.clone();
    bad_label[0] = 255;
    fs::write(p("label"), &bad_label).unwrap();
    expect(matches!(
        load_cifar_binary(&[p("label")], 10),
        Err(Error::LabelRange { .. })
    ));
    Outcome {
        pass: idx_rt && cifar_rt && typed == cases,
        detail: format!(
            "IDX round trip {idx_rt}, CIFAR round trip {cifar_rt}, typed errors {typed}/{cases}"
        ),
    }
}

fn main() {
    let mut all = true;
    all &= check("gradient oracle", gradient_oracle);
    all &= check("KL oracle", kl_oracle);
    all &= check("reduction identities", reduction_identities);
    all &= check("gate distribution", gate_distribution);
    let exp = run_experiment();
    all &= check("directional spiral-10 experiment", || directional(&exp));
    all &= check("error-avalanche trend", || avalanche(&exp));
    all &= check("stochastic trend", || stochastic(&exp));
    all &= check("determinism and persistence", determinism);
    all &= check("loader fixtures", loaders);
    if !all {
        std::process::exit(1);
    }
}

//! Acceptance criteria 1–7. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! Criterion 7 also parses a genuine FER2013 CSV when `FER2013_CSV` points
//! at one.

use std::time::{Duration, Instant};

use lhc_core::backbone::{count_params, BackboneSpec, GateMode, TinyNet};
use lhc_core::container::{Container, Precision};
use lhc_core::data::{
    parse_fer_csv, prepare_split, synthetic_fer, synthetic_samples, tta_enumerate, write_fer_csv, Emotion,
    PreprocessConfig, Samples, TtaConfig,
};
use lhc_core::gradcheck::{lhc_block_check, primitive_suite};
use lhc_core::heads::{efficiency_exact, region_scan, EfficiencyPoint};
use lhc_core::lhc::{LhcBlock, LhcConfig};
use lhc_core::ops::{merge_heads, softmax_rows, split_heads};
use lhc_core::train::{evaluate, fit, default_stages, run_protocol, OptimizerConfig, Verdict};
use lhc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(cond: bool, what: impl Into<String>, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what.into());
    }
}

fn finish(failures: Vec<String>, detail: String, elapsed: Duration, budget: Duration) -> Outcome {
    let mut failures = failures;
    if elapsed > budget {
        failures.push(format!("took {elapsed:.2?}, budget {budget:.0?}"));
    }
    if failures.is_empty() {
        Outcome {
            passed: true,
            detail: format!("{detail}; {elapsed:.2?}"),
        }
    } else {
        Outcome {
            passed: false,
            detail: failures.join("; "),
        }
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let spec = BackboneSpec::full();
    let census = count_params(&spec).expect("census");
    // closed form per block: n·((HW/n)·d + d) + (C² + C) + (s²C² + C)
    let oracle: u64 = spec
        .insertions
        .iter()
        .map(|i| {
            let [h, w, c] = i.lhc.input_shape.map(|v| v as u64);
            let (n, d, s) = (i.lhc.heads as u64, i.lhc.dim as u64, i.lhc.kernel as u64);
            n * ((h * w / n) * d + d) + (c * c + c) + (s * s * c * c + c)
        })
        .sum();
    check(oracle == 4_805_444, format!("oracle {oracle}"), &mut f);
    check(census.attention_only == oracle, format!("attention {} != {oracle}", census.attention_only), &mut f);
    let share = oracle as f64 / (27_600_000.0 + oracle as f64);
    check((census.attention_share - share).abs() < 1e-12, "share differs from oracle", &mut f);
    check((census.attention_share - 0.148).abs() <= 0.002, format!("share {}", census.attention_share), &mut f);
    let detail = format!(
        "attention {} params, total {:.1}M, share {:.2}%",
        census.attention_only,
        census.total as f64 / 1e6,
        100.0 * census.attention_share
    );
    finish(f, detail, t.elapsed(), Duration::from_secs(1))
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let reports = primitive_suite(7, 1e-4).expect("primitive suite");
    let worst = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    for r in reports.iter().filter(|r| !r.passed()) {
        f.push(format!("{} {} rel err {:.2e}", r.name, r.shapes, r.rel_err));
    }
    let cfg = LhcConfig::new(2, 2, 3, 1.0, 3, [4, 4, 3]);
    let block = lhc_block_check(&cfg, 7, 1e-3).expect("block check");
    check(block.passed(), format!("block rel err {:.2e}", block.rel_err), &mut f);
    let detail = format!(
        "{} primitive checks, worst rel err {worst:.1e}; block rel err {:.1e}",
        reports.len(),
        block.rel_err
    );
    finish(f, detail, t.elapsed(), Duration::from_secs(120))
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor::new([1, x.len()], x.to_vec()).unwrap()).into_data()
}

fn argsort(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    idx
}

fn distinct_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let n = rng.gen_range(2..=10);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut s = x.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return x;
        }
    }
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let x = distinct_vector(&mut rng);
        let alpha = 10f64.powf(rng.gen_range(-2.0..1.0));
        let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        if argsort(&softmax_vec(&scaled)) != argsort(&softmax_vec(&x)) {
            f.push(format!("ranking changed in trial {trial} (alpha {alpha})"));
        }
    }
    let mut probes = vec![vec![1.0, 2.0, 3.0]];
    probes.extend((0..20).map(|_| distinct_vector(&mut rng)));
    for x in &probes {
        let n = x.len() as f64;
        let maxes: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|a| softmax_vec(&x.iter().map(|v| a * v).collect::<Vec<_>>()).into_iter().fold(0.0, f64::max))
            .collect();
        check(maxes.windows(2).all(|w| w[1] >= w[0]), format!("one-hot limit not monotone for {x:?}"), &mut f);
        let devs: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|a| {
                softmax_vec(&x.iter().map(|v| a * v).collect::<Vec<_>>())
                    .into_iter()
                    .map(|p| (p - 1.0 / n).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        check(devs.windows(2).all(|w| w[1] < w[0]), format!("uniform limit not monotone for {x:?}"), &mut f);
    }
    let top = softmax_vec(&[1000.0, 2000.0, 3000.0]).into_iter().fold(0.0, f64::max);
    check(top > 1.0 - 1e-6, format!("max entry at alpha 1000 is {top}"), &mut f);

    // the same property inside a block: dynamic scaling keeps each row's argmax
    let cfg = LhcConfig::new(2, 8, 3, 1.0, 3, [4, 4, 6]);
    for seed in 0..10 {
        let block = LhcBlock::new(cfg.clone(), seed).unwrap();
        let x = Tensor::random_uniform([4, 4, 6], -2.0, 2.0, &mut rng);
        let out = block.evaluate(&x).unwrap();
        for (s, w) in out.scores.iter().zip(&out.attention) {
            for (rs, rw) in s.data().chunks(6).zip(w.data().chunks(6)) {
                check(argsort(rs).last() == argsort(rw).last(), "block argmax changed", &mut f);
            }
        }
    }
    let detail = "200 ranking pairs, 21 alpha sweeps, 10 blocks".to_string();
    finish(f, detail, t.elapsed(), Duration::from_secs(10))
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let mut points = 0;
    for a in 0..=8u64 {
        for b in 0..=(8 - a) {
            if a + b == 0 {
                continue;
            }
            let e = efficiency_exact(&EfficiencyPoint { h: 56, w: 56, d: 196, n: 8, a, b, c: 8 - a - b })
                .expect("valid point");
            points += 1;
            check(e.l2 >= e.g2, format!("L2 < G2 at A={a} B={b}"), &mut f);
            check((e.l2 == e.g2) == (a == 0), format!("equality case wrong at A={a} B={b}"), &mut f);
        }
    }
    // n = 8, d = HW/16
    let (h, w) = (56u64, 56u64);
    let rows = region_scan(h, w, 8, h * w / 16).expect("scan");
    let at = |a, b| rows.iter().find(|r| r.a == a && r.b == b).expect("row");
    check(!at(1, 7).l1_favors_local, "(1,7) should favour the global head", &mut f);
    check(at(2, 6).l1_favors_local, "(2,6) should favour local heads", &mut f);
    check(!at(0, 8).l1_favors_local && !at(0, 8).l2_favors_local, "(0,8) should not favour local", &mut f);
    for r in &rows {
        let boundary = r.a as f64 > 0.26 * r.b as f64;
        check(r.l1_favors_local == boundary, format!("A={} B={} off the A > 0.26B boundary", r.a, r.b), &mut f);
    }
    let detail = format!("{points} (A,B) points, {} region rows", rows.len());
    finish(f, detail, t.elapsed(), Duration::from_secs(1))
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let (h, w, c) = (n * rng.gen_range(1..=4), rng.gen_range(1..=7), rng.gen_range(1..=5));
        let x = Tensor::random_uniform([h, w, c], -10.0, 10.0, &mut rng);
        let back = merge_heads(&split_heads(&x, n).unwrap(), h, w).unwrap();
        check(back.bit_eq(&x), format!("round trip failed at {:?} n={n}", x.shape()), &mut f);
    }
    let spec = BackboneSpec::full();
    for (i, ins) in spec.insertions.iter().enumerate() {
        let block = LhcBlock::new(ins.lhc.clone(), i as u64).unwrap();
        let x = Tensor::random_uniform(ins.lhc.input_shape, 0.0, 1.0, &mut rng);
        let y = block.forward(&x).unwrap();
        check(y.shape() == x.shape(), format!("block {i} changed shape"), &mut f);
    }
    let mut gated = BackboneSpec::tiny([8, 8, 1], 7, 5);
    gated.gate = GateMode::Gated { theta: vec![0.0] };
    let net = TinyNet::new(gated).unwrap();
    let mut off = net.clone();
    off.enabled[0] = false;
    let xs: Vec<Tensor> = (0..4).map(|_| Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng)).collect();
    check(net.logits(&xs).unwrap().bit_eq(&off.logits(&xs).unwrap()), "gate 0 differs from ablation", &mut f);
    let detail = "100 round trips, 5 full-size blocks, gated vs ablated bit-equal".to_string();
    finish(f, detail, t.elapsed(), Duration::from_secs(60))
}

fn split_samples(s: &Samples, train: usize, val: usize) -> (Samples, Samples, Samples) {
    let idx: Vec<usize> = (0..s.len()).collect();
    (
        s.subset(&idx[..train]),
        s.subset(&idx[train..train + val]),
        s.subset(&idx[train + val..]),
    )
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();

    // memorisation: 32 unstructured images with cycling labels
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mem = Samples {
        images: (0..32).map(|_| Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng)).collect(),
        labels: (0..32).map(|i| i % 7).collect(),
    };
    let mut net = TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, 6)).unwrap();
    let rep = fit(&mut net, &mem, &OptimizerConfig::Adam { lr: 1e-2 }, 32, 500, 0.01, 6).unwrap();
    let last = *rep.losses.last().unwrap();
    check(rep.accuracy == 1.0, format!("memorisation accuracy {}", rep.accuracy), &mut f);
    check(last < 0.01, format!("memorisation loss {last}"), &mut f);

    // four-stage protocol on 200 toy samples
    let data = synthetic_samples(200, [8, 8, 1], 7, 0.35, 60);
    let (train, val, _test) = split_samples(&data, 140, 30);
    let mut net = TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, 61)).unwrap();
    let report = run_protocol(&mut net, &train, &val, &default_stages(), 62).unwrap();
    let fired = report.stages.iter().filter(|s| s.stopped_early).count();
    check(fired == report.stages.len(), format!("early stopping fired in {fired}/4 stages"), &mut f);
    let last_stage = report.stages.last().unwrap();
    let restored = evaluate(&net, &val, None).unwrap().accuracy;
    check(
        restored == last_stage.best_val_accuracy,
        format!("restored accuracy {restored} != best {}", last_stage.best_val_accuracy),
        &mut f,
    );
    for s in &report.stages {
        let final_epoch = s.epochs.last().unwrap().epoch;
        check(s.best_epoch < final_epoch, format!("{}: best epoch is the last one", s.name), &mut f);
    }
    check(report.verdict != Verdict::Divergent, "protocol diverged", &mut f);
    let epochs: Vec<usize> = report.stages.iter().map(|s| s.epochs.len() - 1).collect();
    let detail = format!(
        "memorised in {} epochs (loss {last:.4}); protocol epochs {epochs:?}, best val acc {:.3}, verdict {:?}",
        rep.epochs, last_stage.best_val_accuracy, report.verdict
    );
    finish(f, detail, t.elapsed(), Duration::from_secs(600))
}

fn pipeline_bytes(csv_text: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let data = parse_fer_csv(csv_text).unwrap();
    let mut round = Vec::new();
    write_fer_csv(data.records(), &mut round).unwrap();
    let prepared = prepare_split(&data.training, &PreprocessConfig { size: 224, rgb: true }).unwrap();
    let mut c = Container::new();
    c.push("train.images", prepared.images, Precision::U8).unwrap();
    c.push(
        "train.labels",
        Tensor::vector(prepared.labels.iter().map(|&l| f64::from(l)).collect()),
        Precision::U8,
    )
    .unwrap();
    let (manifest, mut buf) = c.encode();
    buf.extend_from_slice(manifest.as_bytes());

    let samples = Samples::from_records(&data.private_test, 8).unwrap();
    let net = TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, 70)).unwrap();
    let plan = tta_enumerate(&TtaConfig { shift_px: 1.0, ..TtaConfig::default() });
    let eval = evaluate(&net, &samples, Some(&plan)).unwrap();
    let mut probs = Vec::new();
    for p in eval.probabilities.iter().flatten() {
        probs.extend_from_slice(&p.to_le_bytes());
    }
    buf.extend(round);
    (buf, probs)
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let mut f = Vec::new();
    let mut csv_text = Vec::new();
    write_fer_csv(synthetic_fer([6, 2, 4], 7).records(), &mut csv_text).unwrap();
    let (a_data, a_probs) = pipeline_bytes(&csv_text);
    let (b_data, b_probs) = pipeline_bytes(&csv_text);
    check(a_data == b_data, "preprocessed outputs differ between runs", &mut f);
    check(a_probs == b_probs, "TTA probabilities differ between runs", &mut f);
    let mut detail = format!("{} preprocessed bytes and {} TTA bytes identical", a_data.len(), a_probs.len());
    match std::env::var_os("FER2013_CSV") {
        Some(path) => {
            let file = std::fs::File::open(&path).expect("FER2013_CSV readable");
            let data = parse_fer_csv(std::io::BufReader::new(file)).expect("FER2013 parses");
            let sizes = (data.training.len(), data.public_test.len(), data.private_test.len());
            let counts = data.class_counts();
            check(sizes == (28709, 3589, 3589), format!("split sizes {sizes:?}"), &mut f);
            check(counts[Emotion::Disgust as usize] == 436, format!("disgust {}", counts[1]), &mut f);
            check(counts[Emotion::Happiness as usize] == 7215, format!("happiness {}", counts[3]), &mut f);
            detail.push_str(&format!("; FER2013 splits {sizes:?}"));
        }
        None => detail.push_str("; FER2013 file check not run (FER2013_CSV unset)"),
    }
    finish(f, detail, t.elapsed(), Duration::from_secs(120))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("parameter census", criterion_1),
        ("gradient suite", criterion_2),
        ("softmax scaling properties", criterion_3),
        ("efficiency calculus", criterion_4),
        ("structural identities", criterion_5),
        ("desk-scale training", criterion_6),
        ("pipeline determinism", criterion_7),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let out = run();
        let status = if out.passed { "PASS" } else { "FAIL" };
        failed += usize::from(!out.passed);
        println!("criterion {} [PRIMARY] {name}: {status} ({})", i + 1, out.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

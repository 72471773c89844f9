use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use lhc_core::backbone::{count_params, Position};
use lhc_core::config::RunConfig;
use lhc_core::container::{ContainerWriter, Precision};
use lhc_core::data::{
    parse_fer_csv, preprocess, synthetic_samples, tta_enumerate, Emotion, FerDataset, FerRecord, Samples, Split,
    TtaPlan, NUM_CLASSES,
};
use lhc_core::gradcheck::{lhc_block_check, primitive_suite};
use lhc_core::heads::{ablate_block, dim_from_ratio, head_output_correlation, region_scan, write_region_csv, AblationMode};
use lhc_core::seed::derive_seed;
use lhc_core::train::{accuracy, evaluate, run_protocol, Evaluation, Verdict};
use lhc_core::{BackboneSpec, Error, LhcConfig, Tensor, TinyNet};

use crate::manifest::{now_ms, RunManifest};
use crate::{Command, Common};

pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const DATASET_STEM: &str = "dataset";

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<File>> {
        csv::Writer::from_path(self.path(name)).with_context(|| format!("creating {name}"))
    }
}

fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::CheckShapes { .. } => "check-shapes",
        Command::GradCheck { .. } => "grad-check",
        Command::CountParams { .. } => "count-params",
        Command::Ingest { .. } => "ingest",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::TtaEval { .. } => "tta-eval",
        Command::AnalyzeHeads { .. } => "analyze-heads",
        Command::EfficiencyScan { .. } => "efficiency-scan",
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs one subcommand and records it in `run.toml`.
pub fn run(common: &Common, cmd: &Command) -> Result<()> {
    let started = now_ms();
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let mut seed = common.seed.unwrap_or_default();
    let result = load_config(common).and_then(|cfg| {
        seed = cfg.seed;
        fs::write(common.out.join(EFFECTIVE_CONFIG), cfg.to_toml()?)?;
        let ctx = Ctx {
            out: common.out.clone(),
            cfg,
        };
        dispatch(&ctx, cmd)
    });
    let manifest = RunManifest {
        schema_version: 1,
        subcommand: name(cmd).into(),
        args: std::env::args().skip(1).collect(),
        config: common.config.as_ref().map(|p| p.display().to_string()),
        seed,
        out: common.out.display().to_string(),
        effective_config: Some(EFFECTIVE_CONFIG.into()),
        status: match &result {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e:#}"),
        },
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let written = manifest.write(&common.out);
    result.and(written)
}

fn dispatch(ctx: &Ctx, cmd: &Command) -> Result<()> {
    match cmd {
        Command::CheckShapes { spec } => check_shapes(ctx, spec),
        Command::GradCheck {
            tolerance,
            block_tolerance,
        } => grad_check(ctx, *tolerance, *block_tolerance),
        Command::CountParams { spec } => count(ctx, spec),
        Command::Ingest { dataset } => ingest(ctx, dataset),
        Command::Train { dataset, spec } => train(ctx, dataset.as_deref(), spec),
        Command::Evaluate {
            checkpoint,
            dataset,
            tta,
        } => evaluate_cmd(ctx, checkpoint, dataset.as_deref(), tta),
        Command::TtaEval {
            checkpoint,
            dataset,
            tta,
        } => tta_eval(ctx, checkpoint, dataset.as_deref(), tta),
        Command::AnalyzeHeads {
            checkpoint,
            dataset,
            block_index,
            mode,
        } => analyze_heads(ctx, checkpoint.as_deref(), dataset.as_deref(), *block_index, mode),
        Command::EfficiencyScan { n, d_ratio, h, w } => efficiency_scan(ctx, *n, *d_ratio, *h, *w),
    }
}

fn resolve_spec(ctx: &Ctx, spec: &str) -> Result<BackboneSpec> {
    let side = ctx.cfg.image_side;
    Ok(match spec {
        "full" => BackboneSpec::full(),
        "full-gated" => BackboneSpec::full_gated(),
        "tiny" => BackboneSpec::tiny([side, side, 1], NUM_CLASSES, ctx.cfg.seed),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading spec {path}"))?;
            BackboneSpec::from_toml(&text).with_context(|| format!("spec {path}"))?
        }
    })
}

fn resolve_tta(ctx: &Ctx, tta: &str) -> Result<Option<TtaPlan>> {
    Ok(match tta {
        "off" => None,
        "on" => Some(tta_enumerate(&ctx.cfg.tta)),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading TTA plan {path}"))?;
            Some(TtaPlan::from_toml(&text).with_context(|| format!("TTA plan {path}"))?)
        }
    })
}

fn position_label(p: Position) -> String {
    match p {
        Position::Stem => "stem".into(),
        Position::Stage(i) => format!("stage{i}"),
    }
}

fn check_shapes(ctx: &Ctx, spec: &str) -> Result<()> {
    let spec = resolve_spec(ctx, spec)?;
    spec.validate()?;
    let (stem, stages) = spec.feature_shapes()?;
    let mut wtr = ctx.csv("shapes.csv")?;
    wtr.write_record(["position", "height", "width", "channels"])?;
    let positions = std::iter::once(Position::Stem).chain((0..stages.len()).map(Position::Stage));
    for (pos, s) in positions.zip(std::iter::once(stem).chain(stages)) {
        wtr.write_record([position_label(pos), s[0].to_string(), s[1].to_string(), s[2].to_string()])?;
    }
    wtr.flush()?;
    let mut wtr = ctx.csv("lhc_blocks.csv")?;
    wtr.write_record(["block", "after", "heads", "dim", "head_len", "pool", "kernel"])?;
    for (i, ins) in spec.insertions.iter().enumerate() {
        let c = &ins.lhc;
        wtr.write_record([
            i.to_string(),
            position_label(ins.after),
            c.heads.to_string(),
            c.dim.to_string(),
            c.head_len().to_string(),
            c.pool.to_string(),
            c.kernel.to_string(),
        ])?;
        println!(
            "block {i} after {}: input {:?}, {} heads of length {}, d = {}",
            position_label(ins.after),
            c.input_shape,
            c.heads,
            c.head_len(),
            c.dim
        );
    }
    wtr.flush()?;
    println!("{}: all shapes consistent", spec.name);
    Ok(())
}

fn grad_check(ctx: &Ctx, tolerance: f64, block_tolerance: f64) -> Result<()> {
    let seed = ctx.cfg.seed;
    let mut reports = primitive_suite(seed, tolerance)?;
    reports.push(lhc_block_check(
        &LhcConfig::new(2, 2, 3, 1.0, 3, [4, 4, 3]),
        seed,
        block_tolerance,
    )?);
    let mut wtr = ctx.csv("gradcheck.csv")?;
    wtr.write_record(["name", "shapes", "rel_err", "tolerance", "passed"])?;
    for r in &reports {
        wtr.write_record([
            r.name.clone(),
            r.shapes.clone(),
            r.rel_err.to_string(),
            r.tolerance.to_string(),
            r.passed().to_string(),
        ])?;
    }
    wtr.flush()?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.3e}", reports.len());
    ensure!(
        failed.is_empty(),
        "{} of {} gradient checks failed: {}",
        failed.len(),
        reports.len(),
        failed.join(", ")
    );
    Ok(())
}

fn count(ctx: &Ctx, spec: &str) -> Result<()> {
    let spec = resolve_spec(ctx, spec)?;
    let c = count_params(&spec)?;
    let mut wtr = ctx.csv("census.csv")?;
    wtr.write_record(["component", "params"])?;
    wtr.write_record(["backbone_computed".into(), c.backbone_computed.to_string()])?;
    wtr.write_record(["backbone".into(), c.backbone_only.to_string()])?;
    for (i, n) in c.per_block.iter().enumerate() {
        wtr.write_record([format!("block{i}"), n.to_string()])?;
    }
    wtr.write_record(["gates".into(), c.gate_params.to_string()])?;
    wtr.write_record(["attention".into(), c.attention_only.to_string()])?;
    wtr.write_record(["total".into(), c.total.to_string()])?;
    wtr.write_record(["attention_share".into(), c.attention_share.to_string()])?;
    wtr.flush()?;
    println!(
        "total {} ({:.1}M), attention {}, share {:.1}%",
        c.total,
        c.total as f64 / 1e6,
        c.attention_only,
        100.0 * c.attention_share
    );
    Ok(())
}

fn read_dataset(ctx: &Ctx, path: &Path) -> Result<FerDataset> {
    let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    match parse_fer_csv(BufReader::new(file)) {
        Ok(data) => Ok(data),
        Err(Error::Parse(rows)) => {
            let mut wtr = ctx.csv("row_errors.csv")?;
            wtr.write_record(["row", "message"])?;
            for r in &rows {
                wtr.write_record([r.row.to_string(), r.message.clone()])?;
            }
            wtr.flush()?;
            Err(Error::Parse(rows)).context(format!("dataset {} (all rows in row_errors.csv)", path.display()))
        }
        Err(e) => Err(e).context(format!("dataset {}", path.display())),
    }
}

fn limited<'a>(ctx: &Ctx, data: &'a FerDataset, split: Split) -> &'a [FerRecord] {
    let records = data.split(split);
    match ctx.cfg.max_records {
        0 => records,
        n => &records[..n.min(records.len())],
    }
}

fn ingest(ctx: &Ctx, dataset: &Path) -> Result<()> {
    let data = read_dataset(ctx, dataset)?;
    let pre = ctx.cfg.preprocess;
    let channels = if pre.rgb { 3 } else { 1 };
    let mut writer = ContainerWriter::create(&ctx.path(DATASET_STEM))?;
    let mut counts = ctx.csv("class_counts.csv")?;
    counts.write_record(["split", "label", "emotion", "count"])?;
    for split in Split::ALL {
        let records = limited(ctx, &data, split);
        let mut per_class = [0usize; NUM_CLASSES];
        records.iter().for_each(|r| per_class[r.label as usize] += 1);
        for e in Emotion::ALL {
            counts.write_record([
                split.tag().to_string(),
                e.label().to_string(),
                e.name().to_string(),
                per_class[e as usize].to_string(),
            ])?;
        }
        if records.is_empty() {
            continue;
        }
        writer.begin(
            &format!("{}.images", split.tag()),
            Precision::U8,
            &[records.len(), pre.size, pre.size, channels],
        )?;
        for r in records {
            writer.write_values(preprocess(&r.image(), &pre)?.data())?;
        }
        writer.end()?;
        let labels = records.iter().map(|r| f64::from(r.label.label())).collect();
        writer.add(&format!("{}.labels", split.tag()), &Tensor::new(vec![records.len()], labels)?, Precision::U8)?;
        println!("{}: {} records", split.tag(), records.len());
    }
    counts.flush()?;
    writer.finish()?;
    Ok(())
}

/// Training, validation and test samples: FER splits downscaled to the
/// configured side, or seeded synthetic images.
fn load_splits(ctx: &Ctx, dataset: Option<&Path>) -> Result<[Samples; 3]> {
    let side = ctx.cfg.image_side;
    match dataset {
        Some(path) => {
            let data = read_dataset(ctx, path)?;
            let load = |split| Samples::from_records(limited(ctx, &data, split), side);
            Ok([load(Split::Training)?, load(Split::PublicTest)?, load(Split::PrivateTest)?])
        }
        None => {
            let s = ctx.cfg.synthetic;
            let all = synthetic_samples(
                s.train + s.val + s.test,
                [side, side, 1],
                NUM_CLASSES,
                s.noise,
                derive_seed(ctx.cfg.seed, &[100]),
            );
            let range = |a: usize, b: usize| all.subset(&(a..b).collect::<Vec<_>>());
            Ok([
                range(0, s.train),
                range(s.train, s.train + s.val),
                range(s.train + s.val, s.train + s.val + s.test),
            ])
        }
    }
}

fn check_input(net: &TinyNet, data: &Samples, what: &str) -> Result<()> {
    ensure!(!data.is_empty(), "{what} split is empty");
    let shape = data.images[0].shape();
    ensure!(
        shape == net.spec.input_shape,
        "{what} images have shape {shape:?} but the network expects {:?}",
        net.spec.input_shape
    );
    Ok(())
}

fn train(ctx: &Ctx, dataset: Option<&Path>, spec: &str) -> Result<()> {
    let [train, val, test] = load_splits(ctx, dataset)?;
    let mut net = TinyNet::new(resolve_spec(ctx, spec)?)?;
    check_input(&net, &train, "training")?;
    check_input(&net, &val, "validation")?;
    let report = run_protocol(&mut net, &train, &val, &ctx.cfg.stages, derive_seed(ctx.cfg.seed, &[101]))?;
    for h in &report.stages {
        h.write_csv(File::create(ctx.path(&format!("history_{}.csv", h.name)))?)?;
        println!(
            "{}: {} epochs, best epoch {}, val accuracy {:.4}",
            h.name,
            h.epochs.len() - 1,
            h.best_epoch,
            h.best_val_accuracy
        );
    }
    net.save(&ctx.path(CHECKPOINT_STEM))?;
    let test_acc = if test.is_empty() { None } else { Some(accuracy(&net, &test)?) };
    let verdict = match report.verdict {
        Verdict::Accept => "accept",
        Verdict::Reject => "reject",
        Verdict::Divergent => "divergent",
    };
    let mut wtr = ctx.csv("summary.csv")?;
    wtr.write_record(["metric", "value"])?;
    wtr.write_record(["params", &net.param_count().to_string()])?;
    wtr.write_record(["base_loss", &report.base_loss.to_string()])?;
    wtr.write_record(["final_loss", &report.final_loss.to_string()])?;
    wtr.write_record(["verdict", verdict])?;
    if let Some(acc) = test_acc {
        wtr.write_record(["test_accuracy", &acc.to_string()])?;
    }
    wtr.flush()?;
    println!(
        "base loss {:.4}, final loss {:.4}, verdict {verdict}",
        report.base_loss, report.final_loss
    );
    if report.verdict == Verdict::Divergent {
        bail!("training diverged: final loss {}", report.final_loss);
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<TinyNet> {
    TinyNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_evaluation(ctx: &Ctx, prefix: &str, eval: &Evaluation, labels: &[usize]) -> Result<()> {
    let k = eval.confusion.len();
    let mut wtr = ctx.csv(&format!("{prefix}confusion.csv"))?;
    let mut header = vec!["true".to_string()];
    header.extend((0..k).map(|j| format!("pred{j}")));
    wtr.write_record(&header)?;
    for (i, row) in eval.confusion.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    let mut wtr = ctx.csv(&format!("{prefix}predictions.csv"))?;
    let mut header = vec!["index".to_string(), "label".into(), "predicted".into()];
    header.extend((0..k).map(|j| format!("p{j}")));
    wtr.write_record(&header)?;
    for (i, (p, &label)) in eval.probabilities.iter().zip(labels).enumerate() {
        let mut rec = vec![i.to_string(), label.to_string(), lhc_core::data::argmax(p).to_string()];
        rec.extend(p.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, checkpoint: &Path, dataset: Option<&Path>, tta: &str) -> Result<()> {
    let net = load_net(checkpoint)?;
    let [_, _, test] = load_splits(ctx, dataset)?;
    check_input(&net, &test, "test")?;
    let plan = resolve_tta(ctx, tta)?;
    let eval = evaluate(&net, &test, plan.as_ref())?;
    write_evaluation(ctx, "", &eval, &test.labels)?;
    let mut wtr = ctx.csv("evaluation.csv")?;
    wtr.write_record(["samples", "tta_transforms", "accuracy"])?;
    wtr.write_record([
        test.len().to_string(),
        plan.as_ref().map_or(0, TtaPlan::len).to_string(),
        eval.accuracy.to_string(),
    ])?;
    wtr.flush()?;
    println!("accuracy {:.4} on {} samples", eval.accuracy, test.len());
    Ok(())
}

fn tta_eval(ctx: &Ctx, checkpoint: &Path, dataset: Option<&Path>, tta: &str) -> Result<()> {
    let net = load_net(checkpoint)?;
    let [_, _, test] = load_splits(ctx, dataset)?;
    check_input(&net, &test, "test")?;
    let plan = resolve_tta(ctx, tta)?.unwrap_or_else(TtaPlan::identity);
    fs::write(ctx.path("tta_plan.toml"), plan.to_toml()?)?;
    let plain = evaluate(&net, &test, None)?;
    let augmented = evaluate(&net, &test, Some(&plan))?;
    write_evaluation(ctx, "tta_", &augmented, &test.labels)?;
    let mut wtr = ctx.csv("tta_eval.csv")?;
    wtr.write_record(["mode", "transforms", "total_weight", "accuracy"])?;
    wtr.write_record(["plain".into(), "1".into(), "1".into(), plain.accuracy.to_string()])?;
    wtr.write_record([
        "tta".into(),
        plan.len().to_string(),
        plan.weights.iter().sum::<f64>().to_string(),
        augmented.accuracy.to_string(),
    ])?;
    wtr.flush()?;
    println!(
        "plain accuracy {:.4}, TTA accuracy {:.4} ({} transforms)",
        plain.accuracy,
        augmented.accuracy,
        plan.len()
    );
    Ok(())
}

fn analyze_heads(
    ctx: &Ctx,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    index: usize,
    mode: &str,
) -> Result<()> {
    let mode: AblationMode = mode.parse()?;
    let net = match checkpoint {
        Some(path) => load_net(path)?,
        None => TinyNet::new(resolve_spec(ctx, "tiny")?)?,
    };
    let [_, _, test] = load_splits(ctx, dataset)?;
    check_input(&net, &test, "test")?;
    let report = head_output_correlation(&net, index, &test.images)?;
    let mut wtr = ctx.csv("head_correlation.csv")?;
    for p in &report.pairs {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    let ablated = ablate_block(&net, index, mode)?;
    let before = accuracy(&net, &test)?;
    let after = accuracy(&ablated, &test)?;
    let mean = report.mean.map_or_else(String::new, |m| m.to_string());
    let mut wtr = ctx.csv("ablation.csv")?;
    wtr.write_record([
        "block",
        "mode",
        "mean_correlation",
        "undefined_pairs",
        "accuracy_before",
        "accuracy_after",
        "delta",
    ])?;
    wtr.write_record([
        index.to_string(),
        mode_label(mode),
        mean.clone(),
        report.undefined.to_string(),
        before.to_string(),
        after.to_string(),
        (after - before).to_string(),
    ])?;
    wtr.flush()?;
    println!(
        "block {index}: mean head correlation {}, accuracy {before:.4} -> {after:.4} ({})",
        if mean.is_empty() { "undefined" } else { &mean },
        mode_label(mode)
    );
    Ok(())
}

fn mode_label(mode: AblationMode) -> String {
    match mode {
        AblationMode::SwitchOff => "switch_off".into(),
        AblationMode::Detrain => "detrain".into(),
        AblationMode::Reinit { seed } => format!("reinit:{seed}"),
    }
}

fn efficiency_scan(ctx: &Ctx, n: u64, ratio: f64, h: u64, w: u64) -> Result<()> {
    let d = dim_from_ratio(h, w, n, ratio)?;
    let rows = region_scan(h, w, n, d)?;
    write_region_csv(&rows, File::create(ctx.path("efficiency_region.csv"))?)?;
    let local = rows.iter().filter(|r| r.l1_favors_local).count();
    println!(
        "H={h} W={w} n={n} d={d}: {} splits, {local} favour local heads on the first measure",
        rows.len()
    );
    if rows.iter().any(|r| r.l2 < r.g2) {
        return Err(anyhow!("second-measure ordering violated"));
    }
    Ok(())
}

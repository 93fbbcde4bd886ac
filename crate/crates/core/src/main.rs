//! `hybridsolar` command line: one subcommand per experiment family, all
//! driven by a single TOML run config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hybridsolar::benchmark::{bench_checkpoint, BenchmarkProtocol, BenchmarkResult};
use hybridsolar::checkpoint::ModelCheckpoint;
use hybridsolar::data::{
    balance_by_oversampling, load_manifest, preprocess, read_jsonl, resize_bilinear, stratified_split,
    verify_no_leakage, write_jsonl, DatasetManifest, DatasetSplits, Image, ImageStore, Partition, SampleRecord,
    SplitSpec,
};
use hybridsolar::evaluation::{emit_comparison_report, roc_pr_auc, ComparisonRow, EvalReport};
use hybridsolar::explainability::{grad_cam, mask_quadrant, overlay};
use hybridsolar::model::{BackboneSpec, ADAPTER_BACKBONES};
use hybridsolar::plot::{grouped_bars_png, pr_png, roc_png};
use hybridsolar::synth::{self, load_mask, mask_path, SynthSpec};
use hybridsolar::training::{
    evaluate_model, kfold_cv, run_ablation, train_with_store, AblationReport, CVResult, Evaluation, TrainConfig,
    TrainHistory,
};
use hybridsolar::{Error, Result};

const DETERMINISM_ENV: &str = "HSN_DETERMINISM";
const CHECKPOINT_FILE: &str = "checkpoint.hsn";
const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "hybridsolar", version, about = "CBAM classifier training, evaluation and explainability")]
struct Cli {
    /// TOML run config. Missing keys take their defaults; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the split seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data loading, CV folds and ablation cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Allow `synth` to replace an existing corpus.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic colour-shape corpus with localization masks.
    Synth {
        /// Target directory; defaults to the data root.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Comma-separated per-class counts, or `solar` for the 875-image
        /// solar panel distribution. Overrides --classes/--per-class.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Stratified split, JSON-lines manifests and leakage audit.
    Prepare,
    /// Train, select the best-validation checkpoint and evaluate on test.
    Train,
    /// Stratified k-fold cross-validation.
    Cv {
        #[arg(long)]
        k: Option<usize>,
    },
    /// CBAM, loss and scheduler ablations.
    Ablate,
    /// Evaluate a checkpoint on one partition.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        partition: String,
    },
    /// Grad-CAM overlays for a partition or a class-folder directory.
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Class-folder directory of images; defaults to the test partition.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Inference throughput and size of one or more checkpoints.
    Bench {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Comparison report over finished runs.
    Report {
        /// Run directories holding `eval_report.json`; defaults to `<output>/train`.
        #[arg(long)]
        run: Vec<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    data_root: Option<PathBuf>,
    output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CvOptions {
    k: usize,
    val_fraction: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 5,
            val_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcamOptions {
    layer: Option<String>,
    max_images: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    paths: Paths,
    split: SplitSpec,
    train: TrainConfig,
    cv: CvOptions,
    bench: BenchmarkProtocol,
    gradcam: GradcamOptions,
}

/// A run config plus which defaults still need filling from context.
struct Resolved {
    cfg: RunConfig,
    classes_given: bool,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn missing(path: &Path, what: &str) -> Error {
    io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, what.to_string()))
}

fn has_key(table: &toml::Table, path: &[&str]) -> bool {
    let mut t = table;
    for (i, k) in path.iter().enumerate() {
        match t.get(*k) {
            Some(toml::Value::Table(inner)) if i + 1 < path.len() => t = inner,
            Some(_) if i + 1 == path.len() => return true,
            _ => return false,
        }
    }
    false
}

fn resolve(cli: &Cli) -> Result<Resolved> {
    let (mut cfg, table) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            let cfg: RunConfig = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            (cfg, table)
        }
        None => (RunConfig::default(), toml::Table::new()),
    };
    if let Some(s) = cli.seed {
        cfg.split.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.paths.output_dir = d.clone();
    }
    if let Some(d) = &cli.data_root {
        cfg.paths.data_root = Some(d.clone());
    }
    // The schedule horizon follows the epoch count unless set explicitly.
    if !has_key(&table, &["train", "schedule", "horizon"]) {
        cfg.train.schedule.horizon = cfg.train.epochs.max(1);
    }
    cfg.split.validate()?;
    Ok(Resolved {
        classes_given: has_key(&table, &["train", "model", "num_classes"]),
        cfg,
    })
}

fn check_determinism() -> Result<String> {
    match std::env::var(DETERMINISM_ENV) {
        Err(_) => Ok("strict".into()),
        Ok(v) if v == "strict" => Ok(v),
        Ok(v) => Err(invalid(format!(
            "{DETERMINISM_ENV}={v}: only `strict` is supported (single-threaded GEMM, seeded streams)"
        ))),
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn archive_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let body = toml::to_string(cfg).map_err(|e| invalid(e.to_string()))?;
    write(&dir.join(RESOLVED_CONFIG), body)
}

#[derive(Serialize)]
struct Status<'a> {
    command: &'a str,
    status: &'a str,
    error: Option<String>,
    determinism: String,
}

fn manifests_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.output_dir.join("manifests")
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .data_root
        .as_deref()
        .ok_or_else(|| invalid("no data root: pass --data-root or set paths.data_root"))
}

fn ingest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let root = data_root(cfg)?;
    if !root.is_dir() {
        return Err(missing(root, "data root does not exist"));
    }
    load_manifest(root, None)
}

#[derive(Serialize, Deserialize)]
struct PrepareSummary {
    classes: Vec<String>,
    counts: BTreeMap<String, [usize; 3]>,
    total: usize,
}

/// Split, write manifests and audit. Returns the splits and whether the
/// audit passed.
fn prepare(cfg: &RunConfig) -> Result<(DatasetSplits, bool)> {
    let manifest = ingest(cfg)?;
    let splits = stratified_split(&manifest, &cfg.split)?;
    let dir = manifests_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        write_jsonl(splits.partition(p), &dir.join(format!("{p}.jsonl")))?;
    }
    let target = cfg
        .train
        .oversample_target
        .unwrap_or_else(|| splits.class_counts(Partition::Train).into_iter().max().unwrap_or(0));
    let balanced = balance_by_oversampling(&splits.train, target, cfg.train.seed)?;
    let derived: Vec<SampleRecord> = balanced.into_iter().filter(|r| r.is_derivative()).collect();
    let audit = verify_no_leakage(&splits, &derived);
    write_json(&dir.join("leakage_report.json"), &audit)?;
    let (tr, va, te) = (
        splits.class_counts(Partition::Train),
        splits.class_counts(Partition::Val),
        splits.class_counts(Partition::Test),
    );
    let summary = PrepareSummary {
        classes: splits.classes.clone(),
        counts: (0..splits.classes.len())
            .map(|i| (splits.classes[i].clone(), [tr[i], va[i], te[i]]))
            .collect(),
        total: splits.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    archive_config(&dir, cfg)?;
    Ok((splits, audit.pass))
}

/// Splits from prepared manifests, preparing them first if absent.
fn load_splits(cfg: &RunConfig) -> Result<DatasetSplits> {
    let dir = manifests_dir(cfg);
    let summary = dir.join("summary.json");
    if summary.is_file() {
        let s: PrepareSummary = read_json(&summary)?;
        let mut records = Vec::new();
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            records.extend(read_jsonl(&dir.join(format!("{p}.jsonl")))?);
        }
        let splits = DatasetSplits::from_records(s.classes, records)?;
        // Manifests may have been edited since `prepare`.
        let audit = verify_no_leakage(&splits, &[]);
        if !audit.pass {
            return Err(Error::LeakageDetected {
                violations: audit.violations,
            });
        }
        return Ok(splits);
    }
    let (splits, pass) = prepare(cfg)?;
    if !pass {
        let report: hybridsolar::data::LeakageReport = read_json(&dir.join("leakage_report.json"))?;
        return Err(Error::LeakageDetected {
            violations: report.violations,
        });
    }
    Ok(splits)
}

fn fill_classes(r: &mut Resolved, k: usize) {
    if !r.classes_given {
        r.cfg.train.model.num_classes = k;
    }
}

fn write_eval(dir: &Path, label: &str, partition: &str, classes: &[String], eval: &Evaluation) -> Result<EvalReport> {
    let curves = roc_pr_auc(&eval.scores, &eval.labels, classes.len())?;
    let report = EvalReport::new(label, partition, classes, eval.metrics.clone(), &curves);
    write(&dir.join("eval_report.json"), report.to_json())?;
    write(&dir.join("eval_report.md"), report.to_markdown())?;
    write(&dir.join("confusion.csv"), eval.metrics.confusion.to_csv(classes))?;
    curves.write_csvs(&dir.join("curves"), classes)?;
    roc_png(&curves, &dir.join("roc.png"))?;
    pr_png(&curves, &dir.join("pr.png"))?;
    let preds: Vec<serde_json::Value> = eval
        .predictions
        .iter()
        .zip(&eval.labels)
        .zip(&eval.scores)
        .map(|((p, l), s)| serde_json::json!({"label": l, "prediction": p, "scores": s}))
        .collect();
    write_json(&dir.join("predictions.json"), &preds)?;
    Ok(report)
}

fn cmd_synth(cli: &Cli, r: &Resolved, out: &Option<PathBuf>, k: usize, n: usize, size: usize, counts: &Option<String>) -> Result<()> {
    let out = out
        .clone()
        .or_else(|| r.cfg.paths.data_root.clone())
        .ok_or_else(|| invalid("synth needs --out or --data-root"))?;
    let seed = cli.seed.unwrap_or(r.cfg.split.seed);
    let spec = match counts.as_deref() {
        Some("solar") => SynthSpec::solar_counts(size, seed),
        Some(list) => {
            let counts: Vec<usize> = list
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| invalid(format!("bad count `{s}` in --counts"))))
                .collect::<Result<_>>()?;
            SynthSpec {
                classes: synth::class_names(counts.len()),
                counts,
                image_size: size,
                seed,
            }
        }
        None => SynthSpec::uniform(k, n, size, seed),
    };
    let summary = synth::generate(&spec, &out, cli.force)?;
    println!("wrote {} images in {} classes to {}", summary.images, spec.classes.len(), out.display());
    Ok(())
}

fn cmd_prepare(r: &Resolved) -> Result<()> {
    let (splits, pass) = prepare(&r.cfg)?;
    let dir = manifests_dir(&r.cfg);
    println!(
        "train {} / val {} / test {} records written to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    if !pass {
        let report: hybridsolar::data::LeakageReport = read_json(&dir.join("leakage_report.json"))?;
        return Err(Error::LeakageDetected {
            violations: report.violations,
        });
    }
    println!("leakage audit: pass");
    Ok(())
}

fn cmd_train(r: &mut Resolved, store: &ImageStore) -> Result<()> {
    let splits = load_splits(&r.cfg)?;
    fill_classes(r, splits.classes.len());
    let dir = r.cfg.paths.output_dir.join("train");
    archive_config(&dir, &r.cfg)?;
    let (ck, history) = train_with_store(&r.cfg.train, &splits, store)?;
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join("history.json"), history.to_json())?;
    println!(
        "{}: best epoch {} of {}, {:.1} s",
        history.model,
        history.best_epoch,
        history.epochs.len(),
        history.timing.total_s
    );
    if splits.test.is_empty() {
        println!("test partition empty; no evaluation written");
        return Ok(());
    }
    let model = ck.to_model()?;
    let eval = evaluate_model(
        &model,
        &splits.classes,
        &splits.test,
        &r.cfg.train.preprocess,
        r.cfg.train.batch_size_eval,
        &r.cfg.train.loss,
        store,
    )?;
    let report = write_eval(&dir, &history.model, "test", &splits.classes, &eval)?;
    println!(
        "test accuracy {:.4}, macro-F1 {:.4}",
        report.metrics.accuracy, report.metrics.macro_f1
    );
    Ok(())
}

fn cv_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    if cfg.paths.data_root.is_some() {
        return ingest(cfg);
    }
    let splits = load_splits(cfg)?;
    let records = [splits.train, splits.val, splits.test]
        .concat()
        .into_iter()
        .map(|mut r| {
            r.partition = Partition::Unassigned;
            r
        })
        .collect();
    DatasetManifest::new(splits.classes, records)
}

fn cmd_cv(r: &mut Resolved, k: Option<usize>, store: &ImageStore) -> Result<()> {
    let manifest = cv_manifest(&r.cfg)?;
    fill_classes(r, manifest.num_classes());
    if let Some(k) = k {
        r.cfg.cv.k = k;
    }
    let dir = r.cfg.paths.output_dir.join("cv");
    archive_config(&dir, &r.cfg)?;
    let result: CVResult = kfold_cv(&manifest, r.cfg.cv.k, &r.cfg.train, r.cfg.cv.val_fraction, store)?;
    write(&dir.join("cv_result.json"), result.to_json())?;
    write(&dir.join("cv.md"), result.to_markdown())?;
    println!(
        "{}-fold accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
        result.k, result.mean_accuracy, result.std_accuracy, result.mean_f1, result.std_f1
    );
    Ok(())
}

fn cmd_ablate(r: &mut Resolved, store: &ImageStore) -> Result<()> {
    let splits = load_splits(&r.cfg)?;
    fill_classes(r, splits.classes.len());
    let dir = r.cfg.paths.output_dir.join("ablation");
    archive_config(&dir, &r.cfg)?;
    let report = run_ablation(&r.cfg.train, &splits, store)?;
    write(&dir.join("ablation.json"), report.to_json())?;
    write(&dir.join("ablation.md"), report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: &Option<PathBuf>) -> Result<PathBuf> {
    let p = given
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("train").join(CHECKPOINT_FILE));
    if !p.is_file() {
        return Err(missing(&p, "checkpoint not found"));
    }
    Ok(p)
}

fn parse_partition(s: &str) -> Result<Partition> {
    match s {
        "train" => Ok(Partition::Train),
        "val" => Ok(Partition::Val),
        "test" => Ok(Partition::Test),
        other => Err(invalid(format!("unknown partition `{other}`"))),
    }
}

fn cmd_eval(r: &Resolved, checkpoint: &Option<PathBuf>, partition: &str, store: &ImageStore) -> Result<()> {
    let path = default_checkpoint(&r.cfg, checkpoint)?;
    let part = parse_partition(partition)?;
    let ck = ModelCheckpoint::load(&path)?;
    let splits = load_splits(&r.cfg)?;
    let dir = r.cfg.paths.output_dir.join("eval");
    archive_config(&dir, &r.cfg)?;
    let model = ck.to_model()?;
    let eval = evaluate_model(
        &model,
        &ck.metadata.classes,
        splits.partition(part),
        &r.cfg.train.preprocess,
        r.cfg.train.batch_size_eval,
        &r.cfg.train.loss,
        store,
    )?;
    let report = write_eval(&dir, &ck.spec.label(), partition, &ck.metadata.classes, &eval)?;
    println!(
        "{partition}: accuracy {:.4}, macro-F1 {:.4}",
        report.metrics.accuracy, report.metrics.macro_f1
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcamEntry {
    id: String,
    class: String,
    layer: String,
    all_zero: bool,
    true_quadrant: Option<usize>,
    mass_in_true_quadrant: Option<f64>,
}

#[derive(Serialize)]
struct GradcamSummary {
    images: usize,
    all_zero: usize,
    with_masks: usize,
    /// Zero maps count as 0 mass.
    mean_mass_in_true_quadrant: Option<f64>,
    entries: Vec<GradcamEntry>,
}

fn cmd_gradcam(
    r: &Resolved,
    checkpoint: &Option<PathBuf>,
    images: &Option<PathBuf>,
    layer: &Option<String>,
    limit: Option<usize>,
    store: &ImageStore,
) -> Result<()> {
    let path = default_checkpoint(&r.cfg, checkpoint)?;
    let ck = ModelCheckpoint::load(&path)?;
    let model = ck.to_model()?;
    let (records, mask_root): (Vec<SampleRecord>, Option<PathBuf>) = match images {
        Some(dir) => (load_manifest(dir, None)?.records().to_vec(), Some(dir.clone())),
        None => (load_splits(&r.cfg)?.test, r.cfg.paths.data_root.clone()),
    };
    let limit = limit.or(r.cfg.gradcam.max_images).unwrap_or(records.len());
    let layer = layer.clone().or_else(|| r.cfg.gradcam.layer.clone());
    let dir = r.cfg.paths.output_dir.join("gradcam");
    archive_config(&dir, &r.cfg)?;
    let spec = &r.cfg.train.preprocess;
    let classes = &ck.metadata.classes;
    let entries: Vec<GradcamEntry> = records
        .par_iter()
        .take(limit)
        .map(|rec| {
            let target = classes.iter().position(|c| *c == rec.class_label).ok_or_else(|| Error::ClassPrecondition {
                class: rec.class_label.clone(),
                reason: "not a class of this checkpoint".into(),
            })?;
            let raw = store.load(&rec.image_ref)?;
            let x = preprocess(&raw, spec)?;
            let hm = grad_cam(&model, &x, target, layer.as_deref())?;
            let shown = Image::new(resize_bilinear(raw.pixels(), spec.target_size, spec.target_size));
            let stem = rec.provenance_id.replace(['/', '\\'], "__");
            let stem = stem.rsplit_once('.').map(|(s, _)| s.to_string()).unwrap_or(stem);
            let class_dir = dir.join(&rec.class_label);
            fs::create_dir_all(&class_dir).map_err(|e| io_err(&class_dir, e))?;
            overlay(&hm, &shown)?.save_png(&class_dir.join(format!("{stem}.png")))?;
            hm.write_csv(&class_dir.join(format!("{stem}.csv")))?;
            let true_quadrant = match mask_root.as_deref().and_then(|root| mask_path(root, rec)) {
                Some(mp) if mp.is_file() => {
                    let (h, w, m) = load_mask(&mp)?;
                    mask_quadrant(&m, h, w)
                }
                _ => None,
            };
            Ok(GradcamEntry {
                id: rec.provenance_id.clone(),
                class: rec.class_label.clone(),
                layer: hm.layer_name.clone(),
                all_zero: hm.all_zero,
                true_quadrant,
                mass_in_true_quadrant: true_quadrant.map(|q| hm.quadrant_mass(q).unwrap_or(0.0)),
            })
        })
        .collect::<Result<_>>()?;
    let masses: Vec<f64> = entries.iter().filter_map(|e| e.mass_in_true_quadrant).collect();
    let summary = GradcamSummary {
        images: entries.len(),
        all_zero: entries.iter().filter(|e| e.all_zero).count(),
        with_masks: masses.len(),
        mean_mass_in_true_quadrant: (!masses.is_empty()).then(|| masses.iter().sum::<f64>() / masses.len() as f64),
        entries,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{} heatmaps written to {}", summary.images, dir.display());
    if let Some(m) = summary.mean_mass_in_true_quadrant {
        println!("mean heatmap mass in ground-truth quadrant: {m:.3} (uniform 0.25)");
    }
    Ok(())
}

fn cmd_bench(r: &Resolved, checkpoints: &[PathBuf]) -> Result<()> {
    let list = if checkpoints.is_empty() {
        vec![default_checkpoint(&r.cfg, &None)?]
    } else {
        checkpoints.to_vec()
    };
    let dir = r.cfg.paths.output_dir.join("bench");
    archive_config(&dir, &r.cfg)?;
    let mut results: Vec<BenchmarkResult> = Vec::new();
    for p in &list {
        if !p.is_file() {
            return Err(missing(p, "checkpoint not found"));
        }
        let mut res = bench_checkpoint(p, &r.cfg.bench)?;
        let history = p.with_file_name("history.json");
        if history.is_file() {
            let h: TrainHistory = read_json(&history)?;
            res.train_time_s = Some(h.timing.total_s);
        }
        println!("{}: {:.1} FPS, {:.3} MB", res.model, res.fps, res.size_mb.unwrap_or(0.0));
        results.push(res);
    }
    write_json(&dir.join("benchmark.json"), &results)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn cmd_report(r: &Resolved, runs: &[PathBuf]) -> Result<()> {
    let out = &r.cfg.paths.output_dir;
    let runs = if runs.is_empty() { vec![out.join("train")] } else { runs.to_vec() };
    let bench_file = out.join("bench").join("benchmark.json");
    let benches: Vec<BenchmarkResult> = if bench_file.is_file() { read_json(&bench_file)? } else { Vec::new() };
    let mut rows = Vec::new();
    let mut bars: Vec<Vec<f64>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for run in &runs {
        let rep_path = run.join("eval_report.json");
        if !rep_path.is_file() {
            return Err(missing(&rep_path, "run has no eval_report.json"));
        }
        let rep: EvalReport = read_json(&rep_path)?;
        let ck = run.join(CHECKPOINT_FILE);
        let bench = benches
            .iter()
            .find(|b| b.checkpoint.as_deref().is_some_and(|c| same_file(Path::new(c), &ck)));
        let size_mb = if ck.is_file() {
            Some(hybridsolar::benchmark::measure_size(&ModelCheckpoint::load(&ck)?))
        } else {
            None
        };
        let train_s = run
            .join("history.json")
            .is_file()
            .then(|| read_json::<TrainHistory>(&run.join("history.json")).map(|h| h.timing.total_s))
            .transpose()?;
        bars[0].push(bench.map(|b| b.fps).unwrap_or(0.0));
        bars[1].push(size_mb.unwrap_or(0.0));
        bars[2].push(train_s.unwrap_or(0.0));
        rows.push(ComparisonRow::measured(
            rep.model.clone(),
            rep.metrics.accuracy,
            rep.metrics.macro_f1,
            bench.map(|b| b.fps),
            size_mb,
        ));
    }
    for name in ADAPTER_BACKBONES {
        let label = BackboneSpec {
            name: name.into(),
            ..BackboneSpec::tiny()
        }
        .display_name();
        rows.push(ComparisonRow::skipped(label, "backbone not available in this build"));
    }
    let report = emit_comparison_report(rows)?;
    let dir = out.join("report");
    let mut md = String::from("# Results\n\n");
    md.push_str(&report.to_markdown());
    if let Some(hw) = benches.first().map(|b| &b.hardware_label) {
        md.push_str(&format!("\nFPS measured on: {hw} ({})\n", hybridsolar::benchmark::MEASUREMENT));
    }
    let ablation = out.join("ablation").join("ablation.json");
    if ablation.is_file() {
        let a: AblationReport = read_json(&ablation)?;
        md.push_str("\n## Ablations\n\n");
        md.push_str(&a.to_markdown());
    }
    let cv = out.join("cv").join("cv_result.json");
    if cv.is_file() {
        let c: CVResult = read_json(&cv)?;
        md.push_str(&format!("\n## {}-fold cross-validation\n\n", c.k));
        md.push_str(&c.to_markdown());
    }
    write(&dir.join("report.md"), &md)?;
    write(&dir.join("report.json"), report.to_json())?;
    grouped_bars_png(&bars, &dir.join("efficiency.png"))?;
    archive_config(&dir, &r.cfg)?;
    print!("{md}");
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Prepare => "prepare",
        Command::Train => "train",
        Command::Cv { .. } => "cv",
        Command::Ablate => "ablate",
        Command::Eval { .. } => "eval",
        Command::Gradcam { .. } => "gradcam",
        Command::Bench { .. } => "bench",
        Command::Report { .. } => "report",
    }
}

fn output_subdir(c: &Command) -> Option<&'static str> {
    match c {
        Command::Synth { .. } => None,
        Command::Prepare => Some("manifests"),
        Command::Train => Some("train"),
        Command::Cv { .. } => Some("cv"),
        Command::Ablate => Some("ablation"),
        Command::Eval { .. } => Some("eval"),
        Command::Gradcam { .. } => Some("gradcam"),
        Command::Bench { .. } => Some("bench"),
        Command::Report { .. } => Some("report"),
    }
}

fn run(cli: &Cli, r: &mut Resolved) -> Result<()> {
    let store = ImageStore::new();
    match &cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            image_size,
            counts,
        } => cmd_synth(cli, r, out, *classes, *per_class, *image_size, counts),
        Command::Prepare => cmd_prepare(r),
        Command::Train => cmd_train(r, &store),
        Command::Cv { k } => cmd_cv(r, *k, &store),
        Command::Ablate => cmd_ablate(r, &store),
        Command::Eval { checkpoint, partition } => cmd_eval(r, checkpoint, partition, &store),
        Command::Gradcam {
            checkpoint,
            images,
            layer,
            limit,
        } => cmd_gradcam(r, checkpoint, images, layer, *limit, &store),
        Command::Bench { checkpoint } => cmd_bench(r, checkpoint),
        Command::Report { run } => cmd_report(r, run),
    }
}

/// 2: missing input path or bad config, 3: leakage audit failure,
/// 4: device busy, 1: anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::NoClassDirectories(_) | Error::InvalidConfig(_) => 2,
        Error::LeakageDetected { .. } => 3,
        Error::DeviceBusy(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = check_determinism().and_then(|mode| {
        if let Some(j) = cli.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build_global()
                .map_err(|e| invalid(e.to_string()))?;
        }
        let mut r = resolve(&cli)?;
        let result = run(&cli, &mut r);
        if let Some(sub) = output_subdir(&cli.command) {
            let dir = r.cfg.paths.output_dir.join(sub);
            if dir.is_dir() {
                let status = Status {
                    command: command_name(&cli.command),
                    status: if result.is_ok() { "complete" } else { "failed" },
                    error: result.as_ref().err().map(|e| e.to_string()),
                    determinism: mode,
                };
                write_json(&dir.join("status.json"), &status)?;
            }
        }
        result
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

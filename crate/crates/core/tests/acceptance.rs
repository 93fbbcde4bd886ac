//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybridsolar::benchmark::{bench_checkpoint, measure_fps, BenchmarkProtocol, ConstantLatencyModel};
use hybridsolar::cbam::Cbam;
use hybridsolar::checkpoint::{CheckpointMetadata, ModelCheckpoint};
use hybridsolar::data::{
    balance_by_oversampling, load_manifest, preprocess, stratified_split, verify_no_leakage, DatasetSplits, ImageStore, Partition, SampleRecord, SplitSpec,
};
use hybridsolar::evaluation::binary_curves;
use hybridsolar::explainability::grad_cam;
use hybridsolar::model::{Model, ModelSpec};
use hybridsolar::optimization::{
    cross_entropy, focal_loss, focal_loss_per_sample, focal_loss_with_grad, lr_at, FocalLossSpec, Reduction,
    ScheduleSpec,
};
use hybridsolar::synth::{self, load_mask, mask_path, SynthSpec};
use hybridsolar::training::{assign_folds, evaluate_model, kfold_cv, run_ablation, train_with_store, TrainConfig};

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> (Array2<f64>, Vec<usize>) {
    let logits = Array::from_shape_simple_fn((n, k), || rng.random_range(-scale..scale));
    let targets = (0..n).map(|_| rng.random_range(0..k)).collect();
    (logits, targets)
}

fn loss_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ce_spec = FocalLossSpec {
        gamma: 0.0,
        alpha: 1.0,
        reduction: Reduction::Mean,
    };
    let focal2 = FocalLossSpec::default();
    let mut worst = 0.0f64;
    for draw in 0..1000 {
        let (z, t) = random_logits(&mut rng, 8, 6, 10.0);
        let f0 = ok(focal_loss(&z, &t, &ce_spec))?;
        let ce = ok(cross_entropy(&z, &t))?;
        let oracle: Vec<f64> = ce_per_sample(&z, &t);
        let oracle_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        worst = worst.max((f0 - ce).abs()).max((f0 - oracle_mean).abs());
        ensure!(worst <= 1e-12, "draw {draw}: |focal(γ=0) - CE| = {worst:e}");
        let per = ok(focal_loss_per_sample(&z, &t, &focal2))?;
        for (i, (&f, &c)) in per.iter().zip(&oracle).enumerate() {
            ensure!(f <= c, "draw {draw} sample {i}: focal(γ=2) {f} > CE {c}");
        }
    }
    Ok(format!("1000 draws, max |focal(γ=0) - CE| = {worst:.1e}, focal(γ=2) ≤ CE everywhere"))
}

fn flat(a: &ndarray::ArrayD<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn cbam_params(block: &mut Cbam<f64>) -> Vec<&mut hybridsolar::nn::Param<f64>> {
    vec![
        &mut block.channel.fc1.weight,
        &mut block.channel.fc1.bias,
        &mut block.channel.fc2.weight,
        &mut block.channel.fc2.bias,
        &mut block.spatial.conv.weight,
        &mut block.spatial.conv.bias,
    ]
}

/// Which linear piece of the attention block an evaluation lands on: ReLU
/// signs in the channel MLP plus every max-pool argmax. Recomputed here
/// from the raw weights.
fn kink_pattern(b: &Cbam<f64>, x: &Array4<f64>) -> Vec<usize> {
    let (n, c, h, w) = x.dim();
    let w1 = b.channel.fc1.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b1 = b.channel.fc1.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let w2 = b.channel.fc2.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b2 = b.channel.fc2.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in vals.enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let mut pattern = Vec::new();
    for ni in 0..n {
        let mut logits = vec![0.0; c];
        for ci in 0..c {
            pattern.push(argmax(&mut (0..h * w).map(|i| x[[ni, ci, i / w, i % w]])));
        }
        for pooled in [
            (0..c).map(|ci| (0..h * w).map(|i| x[[ni, ci, i / w, i % w]]).sum::<f64>() / (h * w) as f64).collect::<Vec<_>>(),
            (0..c).map(|ci| (0..h * w).map(|i| x[[ni, ci, i / w, i % w]]).fold(f64::NEG_INFINITY, f64::max)).collect(),
        ] {
            let hidden: Vec<f64> = (0..w1.nrows())
                .map(|j| b1[j] + (0..c).map(|ci| w1[[j, ci]] * pooled[ci]).sum::<f64>())
                .collect();
            pattern.extend(hidden.iter().map(|&v| usize::from(v > 0.0)));
            for (ci, l) in logits.iter_mut().enumerate() {
                *l += b2[ci] + hidden.iter().enumerate().map(|(j, &v)| w2[[ci, j]] * v.max(0.0)).sum::<f64>();
            }
        }
        let gate: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        for y in 0..h {
            for xx in 0..w {
                pattern.push(argmax(&mut (0..c).map(|ci| gate[ci] * x[[ni, ci, y, xx]])));
            }
        }
    }
    pattern
}

/// Central differences, `None` where the `±h` probes straddle a kink.
fn checked_diff(
    x: &mut [f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> (f64, Vec<usize>),
) -> Vec<Option<f64>> {
    let (_, base) = f(x);
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let (up, pu) = f(x);
            x[i] = orig - h;
            let (down, pd) = f(x);
            x[i] = orig;
            (pu == base && pd == base).then(|| (up - down) / (2.0 * h))
        })
        .collect()
}

/// Relative error over the smooth coordinates plus how many were excluded.
fn smooth_rel_err(analytic: &[f64], fd: &[Option<f64>]) -> (f64, usize) {
    let (a, n): (Vec<f64>, Vec<f64>) = analytic.iter().zip(fd).filter_map(|(&a, n)| n.map(|n| (a, n))).unzip();
    (rel_err(&a, &n), analytic.len() - a.len())
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_focal = 0.0f64;
    for inst in 0..20 {
        let (z, t) = random_logits(&mut rng, 8, 6, 3.0);
        let spec = FocalLossSpec {
            gamma: rng.random_range(0.5..3.0),
            alpha: rng.random_range(0.25..1.0),
            reduction: Reduction::Mean,
        };
        let (_, g) = ok(focal_loss_with_grad(&z, &t, &spec))?;
        let mut x: Vec<f64> = z.iter().copied().collect();
        let fd = central_diff(&mut x, H, |v| {
            focal_loss(&Array2::from_shape_vec((8, 6), v.to_vec()).unwrap(), &t, &spec).unwrap()
        });
        let e = rel_err(g.as_slice().unwrap(), &fd);
        worst_focal = worst_focal.max(e);
        ensure!(e <= 1e-4, "focal instance {inst}: relative error {e:e}");
    }

    let mut worst_cbam = 0.0f64;
    let (mut excluded, mut total) = (0, 0);
    for inst in 0..20 {
        let (c, h, w) = (8, 5, 5);
        let mut block = ok(Cbam::<f64>::new(c, 2, 3, &mut rng))?;
        let x: Array4<f64> = Array::from_shape_simple_fn((2, c, h, w), || rng.random_range(-2.0..2.0));
        let r: Array4<f64> = Array::from_shape_simple_fn((2, c, h, w), || rng.random_range(-1.0..1.0));
        let objective = |b: &Cbam<f64>, x: &Array4<f64>| ((&b.forward(x).0 * &r).sum(), kink_pattern(b, x));

        let (_, cache) = block.forward(&x);
        let dx = block.backward(&cache, &r);
        let mut xs: Vec<f64> = x.iter().copied().collect();
        let fd = checked_diff(&mut xs, H, |v| {
            objective(&block, &Array4::from_shape_vec(x.raw_dim(), v.to_vec()).unwrap())
        });
        let (e, skipped) = smooth_rel_err(&dx.iter().copied().collect::<Vec<_>>(), &fd);
        worst_cbam = worst_cbam.max(e);
        excluded += skipped;
        total += fd.len();
        ensure!(e <= 1e-4, "cbam instance {inst}: input-gradient relative error {e:e}");

        let analytic: Vec<Vec<f64>> = cbam_params(&mut block).iter().map(|p| flat(&p.grad)).collect();
        for (pi, a) in analytic.iter().enumerate() {
            let mut values = flat(&cbam_params(&mut block)[pi].value);
            let probe = block.clone();
            let fd = checked_diff(&mut values, H, |v| {
                let mut b = probe.clone();
                let p = &mut cbam_params(&mut b)[pi].value;
                p.iter_mut().zip(v).for_each(|(dst, &src)| *dst = src);
                objective(&b, &x)
            });
            let (e, skipped) = smooth_rel_err(a, &fd);
            worst_cbam = worst_cbam.max(e);
            excluded += skipped;
            total += fd.len();
            ensure!(e <= 1e-4, "cbam instance {inst}: parameter {pi} relative error {e:e}");
        }
    }
    Ok(format!(
        "20+20 instances, worst relative error focal {worst_focal:.1e}, cbam {worst_cbam:.1e} over input and all six \
         parameter tensors ({excluded} of {total} cbam coordinates straddle a ReLU/max kink at ±1e-3 and are excluded)"
    ))
}

fn schedule_exactness() -> Outcome {
    let spec = ScheduleSpec {
        horizon: 25,
        ..ScheduleSpec::default()
    };
    let at = |t: usize, s: &ScheduleSpec| lr_at(t, s).unwrap();
    ensure!((at(0, &spec) - 1e-4).abs() <= 1e-12, "lr_at(0) = {}", at(0, &spec));
    ensure!((at(25, &spec) - spec.lr_min).abs() <= 1e-12, "lr_at(T) = {}", at(25, &spec));
    for t in 1..=25 {
        ensure!(at(t, &spec) <= at(t - 1, &spec), "lr increases at epoch {t}");
    }
    // T/2 is an epoch index only for even horizons.
    for horizon in [24, 26, 50] {
        let s = ScheduleSpec { horizon, ..spec };
        let mid = at(horizon / 2, &s);
        let want = (s.lr_max + s.lr_min) / 2.0;
        ensure!((mid - want).abs() <= 1e-12, "T={horizon}: lr_at(T/2) = {mid}, want {want}");
    }
    ensure!(lr_at(26, &spec).is_err(), "epoch past the horizon accepted");
    Ok(format!(
        "lr_at(0) = {:e}, lr_at(25) = lr_min = {:e}, midpoint exact for T ∈ {{24, 26, 50}}, monotone over T = 25",
        at(0, &spec),
        spec.lr_min
    ))
}

fn cbam_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..50 {
        let c = [4, 8, 16, 32][i % 4];
        let (h, w) = (rng.random_range(3..10), rng.random_range(3..10));
        let kernel = if i % 2 == 0 { 3 } else { 7 };
        let x: Array4<f64> = Array::from_shape_simple_fn((1, c, h, w), || rng.random_range(-3.0..3.0));
        let block = ok(Cbam::<f64>::new(c, 4, kernel, &mut rng))?;
        let (y, cache) = block.forward(&x);
        ensure!(y.dim() == x.dim(), "map {i}: shape {:?} -> {:?}", x.dim(), y.dim());
        let gates = cache.channel_gate().iter().chain(cache.spatial_gate().iter());
        for &g in gates {
            ensure!(g > 0.0 && g < 1.0, "map {i}: gate {g} outside (0, 1)");
        }
        let zero = ok(Cbam::<f64>::zeros(c, 4, kernel))?;
        let (z, _) = zero.forward(&x);
        let err = (&z - &(&x * 0.25)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure!(err <= 1e-12, "map {i}: zero-init output deviates from 0.25·F by {err:e}");
    }
    Ok("50 maps: shape preserved, gates in (0, 1), zero-init output = 0.25·F".into())
}

fn ids(rs: &[SampleRecord]) -> Vec<&str> {
    rs.iter().map(|r| r.provenance_id.as_str()).collect()
}

fn split_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut detected = 0;
    for case in 0..100 {
        let k = rng.random_range(2..=6);
        let counts: Vec<usize> = (0..k).map(|_| rng.random_range(3..=60)).collect();
        let train_pct = rng.random_range(50..=80);
        let val_pct = rng.random_range(5..=(95 - train_pct));
        let test_pct = 100 - train_pct - val_pct;
        let seed: u64 = rng.random();
        let manifest = memory_manifest(&counts);
        let spec = ok(SplitSpec::new(
            train_pct as f64 / 100.0,
            val_pct as f64 / 100.0,
            test_pct as f64 / 100.0,
            seed,
        ))?;
        let splits = ok(stratified_split(&manifest, &spec))?;

        let all: Vec<&str> = [ids(&splits.train), ids(&splits.val), ids(&splits.test)].concat();
        let unique: HashSet<&str> = all.iter().copied().collect();
        let expected: HashSet<&str> = ids(manifest.records()).into_iter().collect();
        ensure!(all.len() == unique.len(), "case {case}: partitions overlap");
        ensure!(unique == expected, "case {case}: partitions not exhaustive");
        for (c, &n) in counts.iter().enumerate() {
            let (tr, va, te) = split_sizes_pct(n, train_pct, val_pct);
            let got = (
                splits.class_counts(Partition::Train)[c],
                splits.class_counts(Partition::Val)[c],
                splits.class_counts(Partition::Test)[c],
            );
            ensure!(got == (tr, va, te), "case {case} class {c} (n={n}): {got:?}, oracle {:?}", (tr, va, te));
        }

        let target = counts.iter().max().unwrap() * 2;
        let balanced = ok(balance_by_oversampling(&splits.train, target, seed))?;
        let derived: Vec<SampleRecord> = balanced.into_iter().filter(|r| r.is_derivative()).collect();
        let audit = verify_no_leakage(&splits, &derived);
        ensure!(audit.pass, "case {case}: clean split failed the audit: {:?}", audit.violations);

        let evals: Vec<&SampleRecord> = splits.val.iter().chain(&splits.test).collect();
        let victim = evals[rng.random_range(0..evals.len())];
        let mut planted = derived.clone();
        planted.push(victim.derive(format!("{}#leak", victim.provenance_id), victim.image_ref.clone()));
        let audit = verify_no_leakage(&splits, &planted);
        if !audit.pass && audit.violations.contains(&victim.provenance_id) {
            detected += 1;
        }
    }
    ensure!(detected == 100, "planted violation detected {detected}/100 times");
    Ok("100 manifests: disjoint, exhaustive, floor-floor-remainder sizes exact, audits pass; planted leak detected 100/100".into())
}

fn solar_corpus_regression() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    ok(synth::generate(&SynthSpec::solar_counts(16, 0), dir.path(), false))?;
    let manifest = ok(load_manifest(dir.path(), None))?;
    ensure!(manifest.len() == 875, "total {}", manifest.len());
    let splits = ok(stratified_split(&manifest, &SplitSpec::default()))?;
    for (class, total, tr, va, te) in SOLAR_SPLITS {
        let ci = splits.class_index(class).ok_or(format!("class {class} missing"))?;
        let got = (
            manifest.count_of(class).unwrap_or(0),
            splits.class_counts(Partition::Train)[ci],
            splits.class_counts(Partition::Val)[ci],
            splits.class_counts(Partition::Test)[ci],
        );
        ensure!(got == (total, tr, va, te), "{class}: {got:?}, oracle {:?}", (total, tr, va, te));
    }
    Ok("875 records; all six per-class 70/15/15 splits match the hand oracle (Clean 135/29/30, Physical-damage 49/10/11)".into())
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let n = rng.random_range(2..=50);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        // Coarse scores force ties in every other instance.
        let levels = if inst % 2 == 0 { 8.0 } else { 1e6 };
        let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor() / levels).collect();
        let auc = binary_curves(&scores, &positive, 0).auc.ok_or("auc undefined")?;
        let oracle = mann_whitney_auc(&scores, &positive);
        worst = worst.max((auc - oracle).abs());
        ensure!(worst <= 1e-9, "instance {inst}: trapezoid {auc}, Mann–Whitney {oracle}");
    }
    let labels = [true, false, true, false, false];
    let constant = binary_curves(&[0.3; 5], &labels, 0).auc.unwrap();
    ensure!(constant == 0.5, "constant scores give {constant}");
    let perfect = binary_curves(&[0.9, 0.1, 0.8, 0.2, 0.3], &labels, 0).auc.unwrap();
    ensure!(perfect == 1.0, "perfect separation gives {perfect}");
    Ok(format!("200 instances, max deviation {worst:.1e}; constant → 0.5, separable → 1.0"))
}

/// On-disk synthetic corpus plus its splits.
struct Corpus {
    dir: tempfile::TempDir,
    splits: DatasetSplits,
}

fn corpus(per_class: usize, size: usize) -> Result<Corpus, String> {
    let dir = ok(tempfile::tempdir())?;
    ok(synth::generate(&SynthSpec::uniform(6, per_class, size, 0), dir.path(), false))?;
    let manifest = ok(load_manifest(dir.path(), None))?;
    let splits = ok(stratified_split(&manifest, &SplitSpec::default()))?;
    Ok(Corpus { dir, splits })
}

fn desk_config(size: usize, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk().with_epochs(epochs);
    cfg.preprocess.target_size = size;
    cfg
}

struct Trained {
    corpus: Corpus,
    model: Model,
    config: TrainConfig,
}

fn learnability(slot: &mut Option<Trained>) -> Outcome {
    let t0 = Instant::now();
    let c = corpus(50, 64)?;
    let cfg = desk_config(64, 15);
    let store = ImageStore::new();

    let largest = c.splits.class_counts(Partition::Train).into_iter().max().unwrap();
    let balanced = ok(balance_by_oversampling(&c.splits.train, largest, cfg.seed))?;
    let derived: Vec<SampleRecord> = balanced.into_iter().filter(|r| r.is_derivative()).collect();
    let audit = verify_no_leakage(&c.splits, &derived);
    ensure!(audit.pass, "leakage audit failed: {:?}", audit.violations);

    let (ck, h1) = ok(train_with_store(&cfg, &c.splits, &store))?;
    let model = ok(ck.to_model())?;
    let eval = ok(evaluate_model(
        &model,
        &c.splits.classes,
        &c.splits.test,
        &cfg.preprocess,
        cfg.batch_size_eval,
        &cfg.loss,
        &store,
    ))?;
    let correct = eval.predictions.iter().zip(&eval.labels).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / eval.labels.len() as f64;
    let (_, h2) = ok(train_with_store(&cfg, &c.splits, &ImageStore::new()))?;
    let same = h1.deterministic_json() == h2.deterministic_json();
    let elapsed = t0.elapsed().as_secs_f64();
    *slot = Some(Trained {
        corpus: c,
        model,
        config: cfg,
    });
    ensure!(acc >= 0.90, "held-out accuracy {acc:.4} < 0.90");
    ensure!(same, "rerun history differs");
    Ok(format!(
        "test accuracy {acc:.4} ({correct}/{}), audit pass, rerun history identical, {elapsed:.0} s for two runs",
        eval.labels.len()
    ))
}

fn leaf_paths(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(&p, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn differing_leaves(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (mut x, mut y) = (BTreeMap::new(), BTreeMap::new());
    leaf_paths("", &serde_json::to_value(a).unwrap(), &mut x);
    leaf_paths("", &serde_json::to_value(b).unwrap(), &mut y);
    let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
    keys.into_iter().filter(|k| x.get(*k) != y.get(*k)).cloned().collect()
}

fn ablation_mechanics() -> Outcome {
    let c = corpus(20, 32)?;
    let cfg = desk_config(32, 3);
    let report = ok(run_ablation(&cfg, &c.splits, &ImageStore::new()))?;
    let expected = [
        (["TinyBackbone", "HybridSolarNet (CBAM)"], "model.use_cbam"),
        (["Cross-Entropy", "Focal (γ=2, α=1)"], "loss.kind"),
        (["Fixed LR", "Cosine Annealing"], "schedule.mode"),
    ];
    ensure!(report.tables.len() == 3, "{} tables", report.tables.len());
    for (table, (labels, factor)) in report.tables.iter().zip(expected) {
        let got: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
        ensure!(got == labels, "{}: labels {got:?}", table.title);
        let (varied, reference) = (&table.rows[0], &table.rows[1]);
        let diff = differing_leaves(&reference.config, &varied.config);
        ensure!(diff == [factor], "{}: configs differ at {diff:?}", table.title);
        ensure!(varied.config_diff == [factor], "{}: reported diff {:?}", table.title, varied.config_diff);
        ensure!(reference.config_diff.is_empty(), "{}: reference diff {:?}", table.title, reference.config_diff);
    }
    let rows = &report.tables[0].rows;
    let (off, on) = (&rows[0], &rows[1]);
    ensure!(on.parameters > off.parameters, "params: on {} vs off {}", on.parameters, off.parameters);
    ensure!(on.size_mb > off.size_mb, "size: on {} vs off {}", on.size_mb, off.size_mb);
    Ok(format!(
        "three tables, labels and single-factor diffs correct; CBAM adds {} parameters ({:.4} → {:.4} MB)",
        on.parameters - off.parameters,
        off.size_mb,
        on.size_mb
    ))
}

/// Quadrant of the mask centroid: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
fn centroid_quadrant(mask: &[bool], h: usize, w: usize) -> usize {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let cy = on.iter().map(|&i| (i / w) as f64 + 0.5).sum::<f64>() / on.len() as f64;
    let cx = on.iter().map(|&i| (i % w) as f64 + 0.5).sum::<f64>() / on.len() as f64;
    2 * usize::from(cy >= h as f64 / 2.0) + usize::from(cx >= w as f64 / 2.0)
}

fn grad_cam_check(trained: &Option<Trained>) -> Outcome {
    let t = trained.as_ref().ok_or("no trained model (learnability run failed to produce one)")?;
    let store = ImageStore::new();
    let records: Vec<&SampleRecord> = t.corpus.splits.test.iter().chain(&t.corpus.splits.val).take(50).collect();
    ensure!(records.len() == 50, "only {} held-out images", records.len());
    let (mut masses, mut zeros) = (Vec::new(), 0);
    for rec in records {
        let target = t.corpus.splits.class_index(&rec.class_label).unwrap();
        let raw = ok(store.load(&rec.image_ref))?;
        let x = ok(preprocess(&raw, &t.config.preprocess))?;
        let hm = ok(grad_cam(&t.model, &x, target, None))?;
        ensure!(hm.values.iter().all(|&v| v >= 0.0), "{}: negative heatmap value", rec.provenance_id);
        let max = hm.values.iter().cloned().fold(0.0f32, f32::max);
        ensure!(
            (hm.all_zero && max == 0.0) || (!hm.all_zero && max == 1.0),
            "{}: max {max}, all_zero {}",
            rec.provenance_id,
            hm.all_zero
        );
        let mp = mask_path(t.corpus.dir.path(), rec).ok_or("record has no mask path")?;
        let (mh, mw, m) = ok(load_mask(&mp))?;
        let q = centroid_quadrant(&m, mh, mw);
        let (h, w) = hm.values.dim();
        let total: f64 = hm.values.iter().map(|&v| v as f64).sum();
        let inside: f64 = hm
            .values
            .indexed_iter()
            .filter(|((y, x), _)| 2 * usize::from(*y >= h / 2) + usize::from(*x >= w / 2) == q)
            .map(|(_, &v)| v as f64)
            .sum();
        if hm.all_zero {
            zeros += 1;
            masses.push(0.0);
        } else {
            masses.push(inside / total);
        }
    }
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    ensure!(mean > 0.25, "mean mass in ground-truth quadrant {mean:.3} ≤ 0.25");
    Ok(format!(
        "50 held-out heatmaps non-negative with unit max ({zeros} flagged zero, counted as 0 mass); mean mass in true quadrant {mean:.3} > 0.25"
    ))
}

fn benchmark_harness() -> Outcome {
    let stub = ConstantLatencyModel {
        latency: Duration::from_millis(10),
    };
    let p = BenchmarkProtocol {
        input_size: 8,
        ..BenchmarkProtocol::default()
    };
    let r = ok(measure_fps(&stub, "stub", &p))?;
    let dev = (r.fps - 3200.0).abs() / 3200.0;
    ensure!(dev <= 0.15, "stub measured {:.1} FPS, {:.1}% from 3200", r.fps, dev * 100.0);

    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("m.hsn");
    let model = ok(Model::new(&ModelSpec::default(), 0))?;
    ok(ModelCheckpoint::from_model(&model, CheckpointMetadata::default()).save(&path))?;
    let before = ok(std::fs::read(&path))?;
    let small = BenchmarkProtocol {
        batch_size: 4,
        warmup_iters: 1,
        timed_iters: 3,
        input_size: 32,
        ..BenchmarkProtocol::default()
    };
    ok(bench_checkpoint(&path, &small))?;
    let after = ok(std::fs::read(&path))?;
    ensure!(before == after, "checkpoint bytes changed");
    Ok(format!(
        "stub {:.1} FPS ({:+.2}% vs 3200); checkpoint bytes identical after benchmarking",
        r.fps,
        (r.fps / 3200.0 - 1.0) * 100.0
    ))
}

fn cv_mechanics() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    ok(synth::generate(&SynthSpec::solar_counts(16, 0), dir.path(), false))?;
    let manifest = ok(load_manifest(dir.path(), None))?;
    ensure!(manifest.len() == 875, "manifest has {} records", manifest.len());

    let folds = ok(assign_folds(&manifest, 5, 0))?;
    let all: Vec<&str> = folds.iter().flat_map(|f| ids(f)).collect();
    ensure!(all.iter().collect::<HashSet<_>>().len() == 875, "folds overlap or miss records");
    for (i, f) in folds.iter().enumerate() {
        ensure!(f.len() == 175, "fold {i} has {} records", f.len());
    }
    for class in manifest.classes() {
        let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|r| &r.class_label == class).count()).collect();
        let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
        ensure!(hi - lo <= 1, "{class}: fold counts {per:?}");
    }

    let mut cfg = desk_config(16, 2);
    cfg.model.num_classes = manifest.num_classes();
    let result = ok(kfold_cv(&manifest, 5, &cfg, 0.15, &ImageStore::new()))?;
    for f in &result.folds {
        ensure!(f.eval_size == 175, "fold {} evaluated on {}", f.fold, f.eval_size);
        ensure!(f.train_size + f.val_size == 700, "fold {}: {} + {} training-side records", f.fold, f.train_size, f.val_size);
    }
    let accs: Vec<f64> = result.per_fold.iter().map(|m| m.accuracy).collect();
    let f1s: Vec<f64> = result.per_fold.iter().map(|m| m.macro_f1).collect();
    let (ma, sa) = population_mean_std(&accs);
    let (mf, sf) = population_mean_std(&f1s);
    let err = [ma - result.mean_accuracy, sa - result.std_accuracy, mf - result.mean_f1, sf - result.std_f1]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
    ensure!(err <= 1e-12, "reported mean/std deviate from recomputation by {err:e}");
    Ok(format!(
        "5 folds of 175, per-class fold counts within 1, accuracy {ma:.4} ± {sa:.4} recomputed (max deviation {err:.1e})"
    ))
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let secs = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {n:>2} {name}: {detail} [{secs:.1} s]");
            true
        }
        Err(why) => {
            println!("FAIL {n:>2} {name}: {why} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected = |n: usize| filter.as_deref().is_none_or(|f| f.split(',').any(|x| x == n.to_string()));
    let mut trained = None;
    let mut results = Vec::new();
    let mut step = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if selected(n) {
            results.push(run(n, name, f));
        }
    };
    step(1, "loss identity", &mut loss_identity);
    step(2, "gradient checks", &mut gradient_checks);
    step(3, "schedule exactness", &mut schedule_exactness);
    step(4, "CBAM contracts", &mut cbam_contracts);
    step(5, "split protocol", &mut split_protocol);
    step(6, "six-class corpus regression", &mut solar_corpus_regression);
    step(7, "AUC oracle", &mut auc_oracle);
    step(8, "end-to-end learnability", &mut || learnability(&mut trained));
    step(9, "ablation mechanics", &mut ablation_mechanics);
    step(10, "Grad-CAM", &mut || {
        if trained.is_none() && selected(10) && !selected(8) {
            learnability(&mut trained).map_err(|e| format!("training for Grad-CAM failed: {e}"))?;
        }
        grad_cam_check(&trained)
    });
    step(11, "benchmark harness", &mut benchmark_harness);
    step(12, "5-fold CV mechanics", &mut cv_mechanics);
    let failed = results.iter().filter(|&&r| !r).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

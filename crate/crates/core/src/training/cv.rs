//! Stratified k-fold cross-validation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use super::trainer::{evaluate_model, train_with_store, TrainConfig};
use crate::data::{DatasetManifest, DatasetSplits, ImageStore, Partition, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

/// Deal every record into one of `k` folds.
///
/// Each class is shuffled by its own seeded stream and dealt round-robin,
/// continuing from where the previous class stopped, so fold sizes differ by
/// at most one both overall and per class.
pub fn assign_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<Vec<SampleRecord>>> {
    if k < 2 {
        return Err(Error::config(format!("k = {k}; cross-validation needs k >= 2")));
    }
    for (class, &n) in manifest.classes().iter().zip(manifest.counts()) {
        if n < k {
            return Err(Error::ClassPrecondition {
                class: class.clone(),
                reason: format!("{n} images cannot fill {k} folds"),
            });
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (ci, class) in manifest.classes().iter().enumerate() {
        let mut recs: Vec<SampleRecord> = manifest.records_of(class).cloned().collect();
        recs.shuffle(&mut keyed_rng(Domain::Fold, seed, ci as u64, 0));
        for (j, r) in recs.into_iter().enumerate() {
            folds[(offset + j) % k].push(r);
        }
        offset += manifest.counts()[ci];
    }
    Ok(folds)
}

/// Train/val/test splits for fold `eval_fold`: the fold itself is the test
/// partition and `floor(val_fraction·n_c)` of each class's remaining records
/// form the internal validation set.
pub fn fold_splits(
    classes: &[String],
    folds: &[Vec<SampleRecord>],
    eval_fold: usize,
    val_fraction: f64,
) -> Result<DatasetSplits> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!("val_fraction = {val_fraction} outside [0, 1)")));
    }
    let mut records = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        if f == eval_fold {
            records.extend(fold.iter().cloned().map(|mut r| {
                r.partition = Partition::Test;
                r
            }));
        }
    }
    for class in classes {
        let pool: Vec<&SampleRecord> = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != eval_fold)
            .flat_map(|(_, fold)| fold.iter())
            .filter(|r| r.class_label == *class)
            .collect();
        let n_val = (val_fraction * pool.len() as f64 + 1e-9).floor() as usize;
        for (j, r) in pool.into_iter().enumerate() {
            let mut r = r.clone();
            r.partition = if j < n_val { Partition::Val } else { Partition::Train };
            records.push(r);
        }
    }
    DatasetSplits::from_records(classes.to_vec(), records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub eval_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Evaluation-fold count per class.
    pub class_counts: Vec<usize>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub k: usize,
    pub classes: Vec<String>,
    pub per_fold: Vec<Metrics>,
    pub folds: Vec<FoldSummary>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl CVResult {
    pub fn from_folds(k: usize, classes: Vec<String>, per_fold: Vec<Metrics>, folds: Vec<FoldSummary>) -> Self {
        let acc: Vec<f64> = per_fold.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = per_fold.iter().map(|m| m.macro_f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Self {
            k,
            classes,
            per_fold,
            folds,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cv result serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Fold | Eval size | Acc. | F1-Score |\n|---|---|---|---|\n");
        for (f, m) in self.folds.iter().zip(&self.per_fold) {
            s.push_str(&format!(
                "| {} | {} | {:.2}% | {:.4} |\n",
                f.fold,
                f.eval_size,
                100.0 * m.accuracy,
                m.macro_f1
            ));
        }
        s.push_str(&format!(
            "| mean ± std | | {:.2}% ± {:.2} | {:.4} ± {:.4} |\n",
            100.0 * self.mean_accuracy,
            100.0 * self.std_accuracy,
            self.mean_f1,
            self.std_f1
        ));
        s
    }
}

/// Train and evaluate once per fold. Folds run as independent jobs on the
/// current rayon pool.
pub fn kfold_cv(
    manifest: &DatasetManifest,
    k: usize,
    config: &TrainConfig,
    val_fraction: f64,
    store: &ImageStore,
) -> Result<CVResult> {
    let folds = assign_folds(manifest, k, config.seed)?;
    let classes = manifest.classes().to_vec();
    let results: Vec<(Metrics, FoldSummary)> = (0..k)
        .into_par_iter()
        .map(|f| {
            let splits = fold_splits(&classes, &folds, f, val_fraction)?;
            let (ck, history) = train_with_store(config, &splits, store)?;
            let model = ck.to_model()?;
            let eval = evaluate_model(
                &model,
                &classes,
                &splits.test,
                &config.preprocess,
                config.batch_size_eval,
                &config.loss,
                store,
            )?;
            let summary = FoldSummary {
                fold: f,
                eval_size: splits.test.len(),
                train_size: splits.train.len(),
                val_size: splits.val.len(),
                class_counts: splits.class_counts(Partition::Test),
                best_epoch: history.best_epoch,
            };
            Ok((eval.metrics, summary))
        })
        .collect::<Result<_>>()?;
    let (per_fold, summaries) = results.into_iter().unzip();
    Ok(CVResult::from_folds(k, classes, per_fold, summaries))
}

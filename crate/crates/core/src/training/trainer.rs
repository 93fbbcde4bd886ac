use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::{stack, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::Metrics;
use crate::checkpoint::{CheckpointMetadata, ModelCheckpoint};
use crate::data::{
    augment, balance_by_oversampling, preprocess, verify_no_leakage, AugmentKey, AugmentationPolicy, DatasetSplits,
    ImageStore, PreprocessSpec, SampleRecord,
};
use crate::device;
use crate::error::{Error, Result};
use crate::evaluation::confusion;
use crate::model::{Model, ModelSpec};
use crate::optimization::{focal_loss_with_grad, lr_at, LossSpec, OptimizerConfig, ScheduleSpec};
use crate::rng::{keyed_rng, Domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size_train: usize,
    pub batch_size_eval: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossSpec,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub model: ModelSpec,
    pub augmentation: AugmentationPolicy,
    pub preprocess: PreprocessSpec,
    /// Per-class training count after oversampling. `None` balances up to
    /// the largest training class and is written as `"largest"`.
    #[serde(with = "oversample_target")]
    pub oversample_target: Option<usize>,
}

mod oversample_target {
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    const LARGEST: &str = "largest";

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Keyword(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Count(*n),
            None => Repr::Keyword(LARGEST.into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Keyword(k) if k == LARGEST => Ok(None),
            Repr::Keyword(k) => Err(de::Error::custom(format!(
                "oversample_target must be a count or \"{LARGEST}\", got \"{k}\""
            ))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size_train: 16,
            batch_size_eval: 32,
            optimizer: OptimizerConfig::default(),
            loss: LossSpec::default(),
            schedule: ScheduleSpec::default(),
            seed: 0,
            model: ModelSpec::default(),
            augmentation: AugmentationPolicy::default(),
            preprocess: PreprocessSpec::default(),
            oversample_target: Some(1000),
        }
    }
}

impl TrainConfig {
    /// CPU-sized settings: 64-pixel inputs, balancing to the largest class,
    /// and a learning rate suited to training from scratch.
    pub fn desk() -> Self {
        Self {
            schedule: ScheduleSpec {
                lr_max: 3e-3,
                ..ScheduleSpec::default()
            },
            preprocess: PreprocessSpec {
                target_size: 64,
                ..PreprocessSpec::default()
            },
            oversample_target: None,
            ..Self::default()
        }
    }

    /// Set the epoch count and stretch the schedule horizon to match.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.schedule.horizon = epochs.max(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size_train < 1 || self.batch_size_eval < 1 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.schedule.horizon < self.epochs - 1 {
            return Err(Error::config(format!(
                "schedule horizon {} is shorter than the {}-epoch run",
                self.schedule.horizon, self.epochs
            )));
        }
        self.model.validate()?;
        self.augmentation.validate()?;
        self.preprocess.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

/// Wall-clock measurements, kept apart so the rest of the history can be
/// compared byte-for-byte across reruns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub total_s: f64,
    pub epoch_s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub model: String,
    pub classes: Vec<String>,
    pub train_records: usize,
    pub val_records: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub timing: Timing,
}

impl TrainHistory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    /// JSON with the timing block removed.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("history serializes");
        v.as_object_mut().unwrap().remove("timing");
        serde_json::to_string_pretty(&v).unwrap()
    }
}

/// Held-out evaluation output; scores are softmax probabilities per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub loss: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn label_index(classes: &[String], r: &SampleRecord) -> Result<usize> {
    classes.iter().position(|c| *c == r.class_label).ok_or_else(|| Error::ClassPrecondition {
        class: r.class_label.clone(),
        reason: format!("record {} has a label the model was not trained on", r.provenance_id),
    })
}

fn stack_batch(tensors: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
    stack(Axis(0), &views).expect("uniform preprocessed shapes")
}

fn softmax_rows(logits: &Array2<f32>) -> Vec<Vec<f64>> {
    logits
        .outer_iter()
        .map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode pass over raw records.
pub fn evaluate_model(
    model: &Model,
    classes: &[String],
    records: &[SampleRecord],
    spec: &PreprocessSpec,
    batch_size: usize,
    loss: &LossSpec,
    store: &ImageStore,
) -> Result<Evaluation> {
    if let Some(r) = records.iter().find(|r| r.is_derivative()) {
        return Err(Error::Protocol(format!(
            "evaluation requested on derived record {}; evaluation sets must hold raw images",
            r.provenance_id
        )));
    }
    let labels: Vec<usize> = records.iter().map(|r| label_index(classes, r)).collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for (chunk, chunk_labels) in records.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let tensors: Vec<Array3<f32>> = chunk
            .par_iter()
            .map(|r| preprocess(&*store.load(&r.image_ref)?, spec))
            .collect::<Result<_>>()?;
        let logits = model.predict_logits(&stack_batch(&tensors))?;
        let (l, _) = focal_loss_with_grad(&logits, chunk_labels, &loss.focal())?;
        loss_sum += l as f64 * chunk.len() as f64;
        scores.extend(softmax_rows(&logits));
    }
    let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let cm = confusion(&predictions, &labels, classes.len())?;
    Ok(Evaluation {
        metrics: Metrics::from_confusion(&cm, classes),
        predictions,
        labels,
        scores,
        loss: if records.is_empty() { 0.0 } else { loss_sum / records.len() as f64 },
    })
}

/// Evaluate a checkpoint on raw records at `batch_size_eval`.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    records: &[SampleRecord],
    spec: &PreprocessSpec,
    batch_size: usize,
    store: &ImageStore,
) -> Result<Evaluation> {
    let model = checkpoint.to_model()?;
    evaluate_model(
        &model,
        &checkpoint.metadata.classes,
        records,
        spec,
        batch_size,
        &LossSpec::default(),
        store,
    )
}

pub fn train(config: &TrainConfig, splits: &DatasetSplits) -> Result<(ModelCheckpoint, TrainHistory)> {
    train_with_store(config, splits, &ImageStore::new())
}

pub fn train_with_store(
    config: &TrainConfig,
    splits: &DatasetSplits,
    store: &ImageStore,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    config.validate()?;
    if config.model.num_classes != splits.classes.len() {
        return Err(Error::config(format!(
            "model has {} outputs, dataset has {} classes",
            config.model.num_classes,
            splits.classes.len()
        )));
    }
    if splits.train.is_empty() {
        return Err(Error::config("training partition is empty"));
    }
    let _device = device::shared();
    let started = Instant::now();
    let started_unix = unix_now();

    let target = config
        .oversample_target
        .unwrap_or_else(|| splits.class_counts(crate::data::Partition::Train).into_iter().max().unwrap_or(0));
    let balanced = balance_by_oversampling(&splits.train, target, config.seed)?;
    let derived: Vec<SampleRecord> = balanced.iter().filter(|r| r.is_derivative()).cloned().collect();
    let audit = verify_no_leakage(splits, &derived);
    if !audit.pass {
        return Err(Error::LeakageDetected {
            violations: audit.violations,
        });
    }
    let classes = splits.classes.clone();
    let targets: Vec<usize> = balanced.iter().map(|r| label_index(&classes, r)).collect::<Result<_>>()?;

    let mut model = Model::new(&config.model, config.seed)?;
    let mut opt = config.optimizer.build::<f32>();
    let focal = config.loss.focal();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut epoch_s = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, &config.schedule)?;
        let mut order: Vec<usize> = (0..balanced.len()).collect();
        order.shuffle(&mut keyed_rng(Domain::Shuffle, config.seed, epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in order.chunks(config.batch_size_train).enumerate() {
            let tensors: Vec<Array3<f32>> = batch
                .par_iter()
                .map(|&i| {
                    let key = AugmentKey {
                        seed: config.seed,
                        epoch: epoch as u64,
                        index: i as u64,
                    };
                    let aug = augment(&balanced[i], &config.augmentation, key, store)?;
                    preprocess(&*store.load(&aug.image_ref)?, &config.preprocess)
                })
                .collect::<Result<_>>()?;
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let x = stack_batch(&tensors);
            let mut drop_rng = keyed_rng(Domain::Dropout, config.seed, epoch as u64, bi as u64);
            model.zero_grad();
            let (logits, cache) = model.forward_train(&x, &mut drop_rng)?;
            let (loss, grad) = focal_loss_with_grad(&logits, &y, &focal)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            model.backward(&cache, &grad);
            opt.step(model.params_mut().into_iter().map(|(_, p)| p), lr);
            loss_sum += loss as f64 * batch.len() as f64;
            for (row, &t) in logits.outer_iter().zip(&y) {
                let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += (argmax(&r) == t) as usize;
            }
        }
        let n = balanced.len() as f64;
        let val = if splits.val.is_empty() {
            None
        } else {
            Some(evaluate_model(
                &model,
                &classes,
                &splits.val,
                &config.preprocess,
                config.batch_size_eval,
                &config.loss,
                store,
            )?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss: val.as_ref().map(|v| v.loss),
            val_accuracy: val.as_ref().map(|v| v.metrics.accuracy),
            val_macro_f1: val.as_ref().map(|v| v.metrics.macro_f1),
        };
        // Without a validation set the last epoch wins.
        let score = record.val_macro_f1.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        epochs.push(record);
        epoch_s.push(t0.elapsed().as_secs_f64());
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let best_record = &epochs[best_epoch];
    let mut metadata = CheckpointMetadata {
        seed: config.seed,
        epoch: best_epoch,
        classes: classes.clone(),
        ..Default::default()
    };
    metadata.metrics.insert("train_loss".into(), best_record.train_loss);
    if let (Some(a), Some(f)) = (best_record.val_accuracy, best_record.val_macro_f1) {
        metadata.metrics.insert("val_accuracy".into(), a);
        metadata.metrics.insert("val_macro_f1".into(), f);
    }
    let history = TrainHistory {
        model: config.model.label(),
        classes,
        train_records: balanced.len(),
        val_records: splits.val.len(),
        best_val_macro_f1: best_record.val_macro_f1,
        epochs,
        best_epoch,
        timing: Timing {
            started_unix_s: started_unix,
            finished_unix_s: unix_now(),
            total_s: started.elapsed().as_secs_f64(),
            epoch_s,
        },
    };
    Ok((ModelCheckpoint::from_model(&best_model, metadata), history))
}

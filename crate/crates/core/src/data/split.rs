use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Partition, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

/// Guards `floor(r·n)` against products like `0.7 * 10 = 6.9999…`.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self { train, val, test, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("split ratio {name} = {r} outside [0, 1]")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Per-class partition sizes: train and val floored, test takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((r * n as f64 + FLOOR_EPS).floor() as usize).min(n);
        let n_train = floor(self.train);
        let n_val = floor(self.val).min(n - n_train);
        (n_train, n_val, n - n_train - n_val)
    }

    fn positive_ratios(&self) -> usize {
        [self.train, self.val, self.test].iter().filter(|&&r| r > 0.0).count()
    }
}

/// Disjoint train/val/test partitions, produced before any augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub classes: Vec<String>,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetSplits {
    pub fn partition(&self, p: Partition) -> &[SampleRecord] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
            Partition::Unassigned => &[],
        }
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class counts of one partition, aligned with `classes`.
    pub fn class_counts(&self, p: Partition) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in self.partition(p) {
            if let Some(i) = self.class_index(&r.class_label) {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Reassemble splits from partition record lists (e.g. read back from
    /// JSON-lines manifests); each record must carry its partition tag.
    pub fn from_records(classes: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let mut splits = DatasetSplits {
            classes,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            if splits.class_index(&r.class_label).is_none() {
                return Err(Error::ClassPrecondition {
                    class: r.class_label.clone(),
                    reason: "label outside the class list".into(),
                });
            }
            match r.partition {
                Partition::Train => splits.train.push(r),
                Partition::Val => splits.val.push(r),
                Partition::Test => splits.test.push(r),
                Partition::Unassigned => {
                    return Err(Error::Protocol(format!("record {} has no partition", r.provenance_id)))
                }
            }
        }
        Ok(splits)
    }
}

/// Seeded stratified split. Within each class the records are shuffled with
/// a stream keyed by `(seed, class index)`, then cut into train, val, test.
pub fn stratified_split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let min_needed = spec.positive_ratios();
    let mut splits = DatasetSplits {
        classes: manifest.classes().to_vec(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (ci, class) in manifest.classes().iter().enumerate() {
        let mut members: Vec<SampleRecord> = manifest.records_of(class).cloned().collect();
        if members.len() < min_needed {
            return Err(Error::ClassPrecondition {
                class: class.clone(),
                reason: format!(
                    "{} samples, need at least {min_needed} to populate every non-empty partition",
                    members.len()
                ),
            });
        }
        let mut rng = keyed_rng(Domain::Split, spec.seed, ci as u64, 0);
        members.shuffle(&mut rng);
        let (n_train, n_val, _) = spec.sizes(members.len());
        for (i, mut r) in members.into_iter().enumerate() {
            r.partition = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Val
            } else {
                Partition::Test
            };
            match r.partition {
                Partition::Train => splits.train.push(r),
                Partition::Val => splits.val.push(r),
                _ => splits.test.push(r),
            }
        }
    }
    Ok(splits)
}

/// Oversample the training partition up to `target_per_class` per class by
/// uniform sampling with replacement. Duplicates get fresh provenance ids and
/// inherit the origin of their source.
pub fn balance_by_oversampling(
    train_records: &[SampleRecord],
    target_per_class: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if let Some(bad) = train_records.iter().find(|r| r.partition != Partition::Train) {
        return Err(Error::Protocol(format!(
            "oversampling requested for {} record {}",
            bad.partition, bad.provenance_id
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in train_records {
        let g = groups.entry(r.class_label.as_str()).or_default();
        if g.is_empty() {
            order.push(r.class_label.as_str());
        }
        g.push(r);
    }
    let mut out = Vec::with_capacity(order.len() * target_per_class);
    let mut taken: HashSet<String> = train_records.iter().map(|r| r.provenance_id.clone()).collect();
    for (ci, class) in order.iter().enumerate() {
        let members = &groups[class];
        if members.len() > target_per_class {
            return Err(Error::ClassPrecondition {
                class: class.to_string(),
                reason: format!(
                    "{} training records exceed the oversampling target {target_per_class}; downsampling is not supported",
                    members.len()
                ),
            });
        }
        out.extend(members.iter().map(|r| (*r).clone()));
        let mut rng = keyed_rng(Domain::Oversample, seed, ci as u64, 0);
        let mut serial = members.len();
        for _ in members.len()..target_per_class {
            let src = members[rng.random_range(0..members.len())];
            let id = loop {
                let id = format!("{}#dup{serial}", src.origin_id);
                serial += 1;
                if taken.insert(id.clone()) {
                    break id;
                }
            };
            out.push(src.derive(id, src.image_ref.clone()));
        }
    }
    Ok(out)
}

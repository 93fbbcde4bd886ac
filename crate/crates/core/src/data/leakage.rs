use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::manifest::SampleRecord;
use super::split::DatasetSplits;

pub const REASON_ORIGIN_IN_EVAL: &str = "train derivative descends from an evaluation record";
pub const REASON_DERIVATIVE_IN_EVAL: &str = "derivative in evaluation split";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub id: String,
    pub reason: String,
}

/// Outcome of a provenance audit. A failing audit is an ordinary value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub pass: bool,
    /// Offending provenance ids, in discovery order.
    pub violations: Vec<String>,
    pub details: Vec<LeakageViolation>,
    /// |{origin ids of train derivatives} ∩ {provenance ids of val ∪ test}|
    pub intersection_size: usize,
}

/// Check that nothing derived for training descends from an evaluation
/// image and that val/test hold raw records only.
pub fn verify_no_leakage(splits: &DatasetSplits, train_derivatives: &[SampleRecord]) -> LeakageReport {
    let eval_ids: HashSet<&str> = splits
        .val
        .iter()
        .chain(&splits.test)
        .map(|r| r.provenance_id.as_str())
        .collect();
    let mut details = Vec::new();
    let mut hit: HashSet<&str> = HashSet::new();
    for r in splits.train.iter().chain(train_derivatives) {
        if eval_ids.contains(r.origin_id.as_str()) && hit.insert(r.origin_id.as_str()) {
            details.push(LeakageViolation {
                id: r.origin_id.clone(),
                reason: REASON_ORIGIN_IN_EVAL.into(),
            });
        }
    }
    let intersection_size = hit.len();
    for r in splits.val.iter().chain(&splits.test) {
        if r.is_derivative() {
            details.push(LeakageViolation {
                id: r.provenance_id.clone(),
                reason: REASON_DERIVATIVE_IN_EVAL.into(),
            });
        }
    }
    LeakageReport {
        pass: details.is_empty(),
        violations: details.iter().map(|d| d.id.clone()).collect(),
        details,
        intersection_size,
    }
}

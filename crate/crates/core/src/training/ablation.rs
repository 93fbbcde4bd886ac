//! The three single-factor ablations: attention, loss and schedule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::metrics::Metrics;
use super::trainer::{evaluate_model, train_with_store, TrainConfig};
use crate::checkpoint::serialized_size_bytes;
use crate::data::{DatasetSplits, ImageStore};
use crate::error::{Error, Result};
use crate::model::count_parameters;
use crate::optimization::{LossKind, ScheduleMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Dotted paths of every config field that differs from the base.
    pub config_diff: Vec<String>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub parameters: usize,
    pub size_mb: f64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub factor: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "### {}\n\n| {} | Acc. | F1-Score | Params | Size (MB) |\n|---|---|---|---|---|\n",
            self.title, self.factor
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2}% | {:.4} | {} | {:.3} |\n",
                r.label,
                100.0 * r.accuracy,
                r.macro_f1,
                r.parameters,
                r.size_mb
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tables: Vec<AblationTable>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation report serializes")
    }

    pub fn to_markdown(&self) -> String {
        self.tables.iter().map(|t| t.to_markdown()).collect::<Vec<_>>().join("\n")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&p, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Leaf paths whose serialized values differ between two configs.
pub fn config_diff(base: &TrainConfig, other: &TrainConfig) -> Vec<String> {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(base).expect("config serializes"), &mut a);
    flatten("", &serde_json::to_value(other).expect("config serializes"), &mut b);
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

struct Cell {
    table: usize,
    label: String,
    config: TrainConfig,
}

fn focal_label(cfg: &TrainConfig) -> String {
    format!("Focal (γ={}, α={})", cfg.loss.gamma, cfg.loss.alpha)
}

/// The reference configuration every table is compared against: attention
/// on, focal loss, cosine schedule, with all other fields from `base`.
pub fn reference_config(base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.model.use_cbam = true;
    cfg.loss.kind = LossKind::Focal;
    cfg.schedule.mode = ScheduleMode::Cosine;
    cfg
}

fn cells(base: &TrainConfig) -> Vec<Cell> {
    let reference = reference_config(base);
    let mut no_cbam = reference.clone();
    no_cbam.model.use_cbam = false;
    let mut ce = reference.clone();
    ce.loss.kind = LossKind::CrossEntropy;
    let mut fixed = reference.clone();
    fixed.schedule.mode = ScheduleMode::Fixed;
    vec![
        Cell {
            table: 0,
            label: reference.model.backbone.display_name().to_string(),
            config: no_cbam,
        },
        Cell {
            table: 0,
            label: "HybridSolarNet (CBAM)".into(),
            config: reference.clone(),
        },
        Cell {
            table: 1,
            label: "Cross-Entropy".into(),
            config: ce,
        },
        Cell {
            table: 1,
            label: focal_label(&reference),
            config: reference.clone(),
        },
        Cell {
            table: 2,
            label: "Fixed LR".into(),
            config: fixed,
        },
        Cell {
            table: 2,
            label: "Cosine Annealing".into(),
            config: reference,
        },
    ]
}

struct Outcome {
    metrics: Metrics,
    parameters: usize,
    size_mb: f64,
}

/// Train and test-evaluate every distinct grid cell (four: the reference
/// run is shared by all three tables), in parallel on the current rayon pool.
pub fn run_ablation(base: &TrainConfig, splits: &DatasetSplits, store: &ImageStore) -> Result<AblationReport> {
    if splits.test.is_empty() {
        return Err(Error::config("ablation needs a non-empty test partition"));
    }
    let cells = cells(base);
    let reference = reference_config(base);
    let mut unique: Vec<TrainConfig> = Vec::new();
    for c in &cells {
        if !unique.contains(&c.config) {
            unique.push(c.config.clone());
        }
    }
    let outcomes: Vec<Outcome> = unique
        .par_iter()
        .map(|cfg| {
            let (ck, _) = train_with_store(cfg, splits, store)?;
            let model = ck.to_model()?;
            let eval = evaluate_model(
                &model,
                &splits.classes,
                &splits.test,
                &cfg.preprocess,
                cfg.batch_size_eval,
                &cfg.loss,
                store,
            )?;
            Ok(Outcome {
                metrics: eval.metrics,
                parameters: count_parameters(&model),
                size_mb: serialized_size_bytes(&model) as f64 / (1u64 << 20) as f64,
            })
        })
        .collect::<Result<_>>()?;

    let titles = [("CBAM ablation", "Model"), ("Loss ablation", "Loss"), ("Scheduler ablation", "Scheduler")];
    let mut tables: Vec<AblationTable> = titles
        .iter()
        .map(|(t, f)| AblationTable {
            title: t.to_string(),
            factor: f.to_string(),
            rows: Vec::new(),
        })
        .collect();
    for c in cells {
        let o = &outcomes[unique.iter().position(|u| *u == c.config).unwrap()];
        tables[c.table].rows.push(AblationRow {
            label: c.label,
            config_diff: config_diff(&reference, &c.config),
            accuracy: o.metrics.accuracy,
            macro_f1: o.metrics.macro_f1,
            parameters: o.parameters,
            size_mb: o.size_mb,
            config: c.config,
        });
    }
    Ok(AblationReport { tables })
}

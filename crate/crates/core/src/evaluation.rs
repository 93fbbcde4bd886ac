//! Confusion matrices, one-vs-rest ROC/PR curves and the comparison report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> usize {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn to_csv(&self, classes: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for c in classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in classes.iter().zip(&self.counts) {
            out.push_str(c);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::TargetOutOfRange {
                index: p.max(l),
                classes: num_classes,
            });
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Points of a threshold sweep. `thresholds[i]` produced `(x[i], y[i])`;
/// the leading point of a ROC curve has threshold `+∞`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub thresholds: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,x,y\n");
        for ((t, x), y) in self.thresholds.iter().zip(&self.x).zip(&self.y) {
            writeln!(out, "{t},{x},{y}").unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCurves {
    pub class_index: usize,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the class has no positives or no negatives.
    pub roc: Option<Curve>,
    pub auc: Option<f64>,
    /// `None` when the class has no positives.
    pub pr: Option<Curve>,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub per_class: Vec<ClassCurves>,
    /// Pooled one-vs-rest pairs over every (sample, class).
    pub micro: ClassCurves,
    /// Mean AUC over classes where it is defined.
    pub macro_auc: Option<f64>,
}

impl CurveSet {
    pub fn per_class_auc(&self) -> Vec<Option<f64>> {
        self.per_class.iter().map(|c| c.auc).collect()
    }

    pub fn micro_auc(&self) -> Option<f64> {
        self.micro.auc
    }

    pub fn write_csvs(&self, dir: &Path, classes: &[String]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        let named = self
            .per_class
            .iter()
            .map(|c| (classes.get(c.class_index).cloned().unwrap_or_else(|| c.class_index.to_string()), c))
            .chain(std::iter::once(("micro".to_string(), &self.micro)));
        for (name, c) in named {
            if let Some(roc) = &c.roc {
                write(format!("roc_{name}.csv"), roc.to_csv())?;
            }
            if let Some(pr) = &c.pr {
                write(format!("pr_{name}.csv"), pr.to_csv())?;
            }
        }
        Ok(())
    }
}

/// Binary sweep over the unique scores, highest first. Each threshold `t`
/// predicts positive for `score >= t`.
fn sweep(pairs: &mut [(f64, bool)]) -> Vec<(f64, usize, usize)> {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

pub fn binary_curves(scores: &[f64], positive: &[bool], class_index: usize) -> ClassCurves {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    let steps = sweep(&mut pairs);

    let (roc, auc) = if p > 0 && n > 0 {
        let mut c = Curve {
            thresholds: vec![f64::INFINITY],
            x: vec![0.0],
            y: vec![0.0],
        };
        let mut area = 0.0;
        for &(t, tp, fp) in &steps {
            let (x, y) = (fp as f64 / n as f64, tp as f64 / p as f64);
            let (x0, y0) = (*c.x.last().unwrap(), *c.y.last().unwrap());
            area += (x - x0) * (y + y0) / 2.0;
            c.thresholds.push(t);
            c.x.push(x);
            c.y.push(y);
        }
        (Some(c), Some(area))
    } else {
        (None, None)
    };

    let (pr, ap) = if p > 0 {
        let mut c = Curve {
            thresholds: vec![f64::INFINITY],
            x: vec![0.0],
            y: vec![1.0],
        };
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &(t, tp, fp) in &steps {
            let recall = tp as f64 / p as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
            c.thresholds.push(t);
            c.x.push(recall);
            c.y.push(precision);
        }
        (Some(c), Some(ap))
    } else {
        (None, None)
    };

    ClassCurves {
        class_index,
        positives: p,
        negatives: n,
        roc,
        auc,
        pr,
        average_precision: ap,
    }
}

/// One-vs-rest ROC and PR curves for every class plus the micro average.
pub fn roc_pr_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<CurveSet> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != num_classes {
            return Err(Error::shape(format!("score row {i} has {} entries, expected {num_classes}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape(format!("score row {i} is not finite")));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::TargetOutOfRange {
            index: l,
            classes: num_classes,
        });
    }
    let per_class: Vec<ClassCurves> = (0..num_classes)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            binary_curves(&s, &y, k)
        })
        .collect();
    let pooled_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let pooled_y: Vec<bool> = labels.iter().flat_map(|&l| (0..num_classes).map(move |k| k == l)).collect();
    let micro = binary_curves(&pooled_s, &pooled_y, num_classes);
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CurveSet {
        per_class,
        micro,
        macro_auc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Measured,
    Skipped,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub status: RowStatus,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub fps: Option<f64>,
    pub size_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ComparisonRow {
    pub fn measured(model: impl Into<String>, accuracy: f64, macro_f1: f64, fps: Option<f64>, size_mb: Option<f64>) -> Self {
        Self {
            model: model.into(),
            status: RowStatus::Measured,
            accuracy: Some(accuracy),
            macro_f1: Some(macro_f1),
            fps,
            size_mb,
            note: None,
        }
    }

    pub fn skipped(model: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            status: RowStatus::Skipped,
            accuracy: None,
            macro_f1: None,
            fps: None,
            size_mb: None,
            note: Some(reason.into()),
        }
    }

    fn reference(model: &str, accuracy: f64, macro_f1: f64, fps: f64, size_mb: f64) -> Self {
        Self {
            model: model.into(),
            status: RowStatus::Reference,
            accuracy: Some(accuracy),
            macro_f1: Some(macro_f1),
            fps: Some(fps),
            size_mb: Some(size_mb),
            note: None,
        }
    }
}

/// Published held-out test results (Kaggle solar panel images, RTX 3060).
/// Not reproducible at desk scale; rendered as a separate reference table.
#[allow(clippy::approx_constant)]
pub fn reference_rows() -> Vec<ComparisonRow> {
    vec![
        ComparisonRow::reference("HybridSolarNet (published)", 0.9237, 0.9226, 54.9, 16.3),
        ComparisonRow::reference("EfficientNet-B0", 0.9084, 0.9072, 57.8, 15.5),
        ComparisonRow::reference("VGG19", 0.8779, 0.8780, 39.9, 532.6),
        ComparisonRow::reference("MobileNetV3", 0.8626, 0.8593, 59.0, 16.2),
        ComparisonRow::reference("ResNet50", 0.8397, 0.8391, 43.6, 89.9),
        ComparisonRow::reference("Custom CNN", 0.7863, 0.7853, 56.5, 5.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub reference: Vec<ComparisonRow>,
}

fn sort_rows(rows: &mut [ComparisonRow]) {
    // stable: skipped rows keep their input order at the bottom
    rows.sort_by(|a, b| match (a.accuracy, b.accuracy) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub fn emit_comparison_report(rows: Vec<ComparisonRow>) -> Result<ComparisonReport> {
    if rows.is_empty() {
        return Err(Error::config("comparison report needs at least one row"));
    }
    let mut rows = rows;
    sort_rows(&mut rows);
    let mut reference = reference_rows();
    sort_rows(&mut reference);
    Ok(ComparisonReport { rows, reference })
}

fn fmt_size(mb: f64) -> String {
    if mb >= 1.0 {
        format!("{mb:.1}")
    } else {
        format!("{mb:.3}")
    }
}

/// Markdown table with columns Model / Acc. / F1-Score / FPS / Size (MB) / Δ Acc.
/// The delta is in percentage points against the top row.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let top = rows.iter().find_map(|r| r.accuracy);
    let mut out = String::from("| Model | Acc. | F1-Score | FPS | Size (MB) | Δ Acc. |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let skipped = || "skipped".to_string();
        let dash = || "–".to_string();
        let (acc, f1, delta) = match (r.accuracy, r.macro_f1) {
            (Some(a), Some(f)) => {
                let d = top.map(|t| format!("{:+.2} pp", (a - t) * 100.0)).unwrap_or_else(dash);
                (format!("{:.2}%", a * 100.0), format!("{f:.4}"), d)
            }
            _ => (skipped(), skipped(), dash()),
        };
        let fps = r.fps.map(|v| format!("{v:.1}")).unwrap_or_else(|| {
            if r.status == RowStatus::Skipped {
                skipped()
            } else {
                dash()
            }
        });
        let size = r.size_mb.map(fmt_size).unwrap_or_else(|| {
            if r.status == RowStatus::Skipped {
                skipped()
            } else {
                dash()
            }
        });
        writeln!(out, "| {} | {acc} | {f1} | {fps} | {size} | {delta} |", r.model).unwrap();
    }
    out
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("## Comparison (held-out test set)\n\n");
        out.push_str(&render_table(&self.rows));
        let notes: Vec<_> = self.rows.iter().filter_map(|r| r.note.as_ref().map(|n| (&r.model, n))).collect();
        if !notes.is_empty() {
            out.push('\n');
            for (m, n) in notes {
                writeln!(out, "- {m}: {n}").unwrap();
            }
        }
        out.push_str("\n## Published reference (not reproduced at desk scale)\n\n");
        out.push_str(&render_table(&self.reference));
        out
    }
}

/// Full held-out evaluation: classification metrics plus AUC summaries.
/// Curves themselves are exported as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub partition: String,
    pub classes: Vec<String>,
    pub metrics: crate::training::Metrics,
    pub per_class_auc: Vec<Option<f64>>,
    pub per_class_average_precision: Vec<Option<f64>>,
    pub micro_auc: Option<f64>,
    pub macro_auc: Option<f64>,
}

impl EvalReport {
    pub fn new(
        model: impl Into<String>,
        partition: impl Into<String>,
        classes: &[String],
        metrics: crate::training::Metrics,
        curves: &CurveSet,
    ) -> Self {
        Self {
            model: model.into(),
            partition: partition.into(),
            classes: classes.to_vec(),
            metrics,
            per_class_auc: curves.per_class_auc(),
            per_class_average_precision: curves.per_class.iter().map(|c| c.average_precision).collect(),
            micro_auc: curves.micro_auc(),
            macro_auc: curves.macro_auc,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        let m = &self.metrics;
        let mut out = format!(
            "## {} on {}\n\nAccuracy {:.2}%, macro-F1 {:.4}, micro AUC {}, macro AUC {}\n\n",
            self.model,
            self.partition,
            100.0 * m.accuracy,
            m.macro_f1,
            opt(self.micro_auc),
            opt(self.macro_auc)
        );
        out.push_str("| Class | Precision | Recall | F1 | Support | AUC | AP |\n|---|---|---|---|---|---|---|\n");
        for (i, c) in m.per_class.iter().enumerate() {
            writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                c.class,
                c.precision,
                c.recall,
                c.f1,
                c.support,
                opt(self.per_class_auc.get(i).copied().flatten()),
                opt(self.per_class_average_precision.get(i).copied().flatten())
            )
            .unwrap();
        }
        out.push_str("\nConfusion matrix (rows true, columns predicted):\n\n");
        write!(out, "| |").unwrap();
        for c in &self.classes {
            write!(out, " {c} |").unwrap();
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.classes.len()));
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&m.confusion.counts) {
            write!(out, "| {c} |").unwrap();
            for v in row {
                write!(out, " {v} |").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

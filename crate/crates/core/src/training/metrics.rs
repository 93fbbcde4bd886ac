use serde::{Deserialize, Serialize};

use crate::evaluation::ConfusionMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Held-out classification metrics. F1 is macro-averaged over every class,
/// and a class with no true and no predicted samples contributes an F1 of 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub support: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix, classes: &[String]) -> Self {
        let k = cm.num_classes();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|i| {
                let tp = cm.counts[i][i];
                let precision = ratio(tp, cm.predicted(i));
                let recall = ratio(tp, cm.support(i));
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    class: classes.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    precision,
                    recall,
                    f1,
                    support: cm.support(i),
                }
            })
            .collect();
        let macro_f1 = if k == 0 {
            0.0
        } else {
            per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64
        };
        Self {
            accuracy: cm.accuracy(),
            macro_f1,
            support: per_class.iter().map(|c| c.support).collect(),
            per_class,
            confusion: cm.clone(),
        }
    }

    pub fn total(&self) -> usize {
        self.support.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::confusion;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        let m = Metrics::from_confusion(&confusion(&y, &y, 3).unwrap(), &names(3));
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn two_class_hand_example() {
        // class A (0): TP=1, FN=1, FP=0, TN=2
        let labels = [0, 0, 1, 1];
        let preds = [0, 1, 1, 1];
        let m = Metrics::from_confusion(&confusion(&preds, &labels, 2).unwrap(), &names(2));
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.per_class[0].precision, 1.0);
        assert_eq!(m.per_class[0].recall, 0.5);
        assert_eq!(m.accuracy, 0.75);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let y = [0, 0, 1];
        let m = Metrics::from_confusion(&confusion(&y, &y, 3).unwrap(), &names(3));
        assert_eq!(m.per_class[2].f1, 0.0);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }
}

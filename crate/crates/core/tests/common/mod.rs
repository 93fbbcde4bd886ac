//! Test-side oracles, written independently of the library code they check.

#![allow(dead_code)]

use std::sync::Arc;

use hybridsolar::data::{DatasetManifest, Image, ImageRef, SampleRecord};
use ndarray::Array2;

/// Hand-computed 70/15/15 splits of the six-class solar corpus:
/// (class, total, train, val, test).
pub const SOLAR_SPLITS: [(&str, usize, usize, usize, usize); 6] = [
    ("Bird-drop", 192, 134, 28, 30),
    ("Clean", 194, 135, 29, 30),
    ("Dusty", 191, 133, 28, 30),
    ("Electrical-damage", 104, 72, 15, 17),
    ("Physical-damage", 70, 49, 10, 11),
    ("Snow-covered", 124, 86, 18, 20),
];

/// Split sizes with integer percentages: floor, floor, remainder.
pub fn split_sizes_pct(n: usize, train_pct: usize, val_pct: usize) -> (usize, usize, usize) {
    let tr = train_pct * n / 100;
    let va = (val_pct * n / 100).min(n - tr);
    (tr, va, n - tr - va)
}

/// Mann–Whitney U / (P·N): ties between a positive and a negative count 1/2.
pub fn mann_whitney_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    let mut u = 0.0;
    for &a in &pos {
        for &b in &neg {
            u += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (pos.len() * neg.len()) as f64
}

/// Per-sample cross-entropy from an explicit log-sum-exp.
pub fn ce_per_sample(logits: &Array2<f64>, targets: &[usize]) -> Vec<f64> {
    logits
        .outer_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-12).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` at `x`, step `h`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn population_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// In-memory manifest with `counts[c]` blank images in class `class{c}`.
pub fn memory_manifest(counts: &[usize]) -> DatasetManifest {
    let img = Arc::new(Image::filled(3, 4, 4, 0.0));
    let classes: Vec<String> = (0..counts.len()).map(|c| format!("class{c}")).collect();
    let mut records = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            records.push(SampleRecord::raw(
                format!("{}/{i:04}.png", classes[c]),
                classes[c].clone(),
                ImageRef::Memory(img.clone()),
            ));
        }
    }
    DatasetManifest::new(classes, records).unwrap()
}

//! Static PNG charts: ROC/PR curves and grouped bars. No text rendering;
//! the numbers behind every chart are written alongside as CSV or markdown.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluation::{Curve, CurveSet};

const SIZE: u32 = 480;
const MARGIN: u32 = 40;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([180, 180, 180]);

/// Distinct line colours, cycled by series index.
pub const PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
    [247, 129, 191],
    [0, 0, 0],
];

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Self {
            img: RgbImage::from_pixel(SIZE, SIZE, WHITE),
        };
        let lo = MARGIN as f64;
        let hi = (SIZE - MARGIN) as f64;
        c.line_px((lo, hi), (hi, hi), BLACK);
        c.line_px((lo, hi), (lo, lo), BLACK);
        c
    }

    /// Unit-square coordinates to pixels, y up.
    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        (MARGIN as f64 + x.clamp(0.0, 1.0) * span, (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < SIZE && (y as u32) < SIZE {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line_px(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            self.put(x.round() as i64, y.round() as i64, c);
            self.put(x.round() as i64 + 1, y.round() as i64, c);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            let a = self.to_px(w[0].0, w[0].1);
            let b = self.to_px(w[1].0, w[1].1);
            self.line_px(a, b, c);
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (a, b) = (self.to_px(x0, y0), self.to_px(x1, y1));
        for y in b.1.round() as i64..=a.1.round() as i64 {
            for x in a.0.round() as i64..=b.0.round() as i64 {
                self.put(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn points(c: Option<&Curve>) -> Vec<(f64, f64)> {
    c.map(|c| c.x.iter().copied().zip(c.y.iter().copied()).collect()).unwrap_or_default()
}

/// Per-class ROC curves (palette order) plus the micro average in black,
/// over the chance diagonal.
pub fn roc_png(curves: &CurveSet, path: &Path) -> Result<()> {
    let mut cv = Canvas::new();
    cv.polyline(&[(0.0, 0.0), (1.0, 1.0)], GREY);
    for (i, c) in curves.per_class.iter().enumerate() {
        cv.polyline(&points(c.roc.as_ref()), Rgb(PALETTE[i % (PALETTE.len() - 1)]));
    }
    cv.polyline(&points(curves.micro.roc.as_ref()), BLACK);
    cv.save(path)
}

pub fn pr_png(curves: &CurveSet, path: &Path) -> Result<()> {
    let mut cv = Canvas::new();
    for (i, c) in curves.per_class.iter().enumerate() {
        cv.polyline(&points(c.pr.as_ref()), Rgb(PALETTE[i % (PALETTE.len() - 1)]));
    }
    cv.polyline(&points(curves.micro.pr.as_ref()), BLACK);
    cv.save(path)
}

/// Grouped bars: one group per metric, one bar per model, each metric
/// scaled by its own maximum.
pub fn grouped_bars_png(metrics: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut cv = Canvas::new();
    let groups = metrics.len().max(1) as f64;
    for (g, values) in metrics.iter().enumerate() {
        let max = values.iter().cloned().fold(0.0, f64::max);
        let n = values.len().max(1) as f64;
        let slot = 1.0 / groups;
        let bar = slot * 0.8 / n;
        for (i, &v) in values.iter().enumerate() {
            let x0 = g as f64 * slot + slot * 0.1 + i as f64 * bar;
            let h = if max > 0.0 { v / max } else { 0.0 };
            cv.rect(x0, 0.0, x0 + bar * 0.9, h, Rgb(PALETTE[i % PALETTE.len()]));
        }
    }
    cv.save(path)
}

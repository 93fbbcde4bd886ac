//! Grad-CAM heatmaps and overlays.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::data::{resize_bilinear, Image};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::quadrant_bounds;

/// Blend weight of the colormap in [`overlay`].
pub const OVERLAY_OPACITY: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Input-resolution map, values in [0, 1].
    pub values: Array2<f32>,
    /// The rectified map at feature resolution, before upsampling and
    /// normalization.
    pub coarse: Array2<f32>,
    pub target_class: usize,
    pub layer_name: String,
    /// No activation survived the rectifier; `values` is all zeros.
    pub all_zero: bool,
}

impl Heatmap {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.outer_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{}", cells.join(",")).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Share of total heatmap mass inside quadrant `q` (0 top-left,
    /// 1 top-right, 2 bottom-left, 3 bottom-right). `None` for an all-zero map.
    pub fn quadrant_mass(&self, q: usize) -> Option<f64> {
        let (h, w) = self.dims();
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            return None;
        }
        let (rows, cols) = quadrant_bounds(q, h, w);
        let inside: f64 = rows
            .flat_map(|y| cols.clone().map(move |x| (y, x)))
            .map(|(y, x)| self.values[[y, x]] as f64)
            .sum();
        Some(inside / total)
    }
}

/// Quadrant holding the centroid of a row-major `h×w` mask.
pub fn mask_quadrant(mask: &[bool], h: usize, w: usize) -> Option<usize> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sy += (i / w) as f64 + 0.5;
        sx += (i % w) as f64 + 0.5;
        n += 1;
    }
    if n == 0 || mask.len() != h * w {
        return None;
    }
    let bottom = sy / n as f64 >= h as f64 / 2.0;
    let right = sx / n as f64 >= w as f64 / 2.0;
    Some(2 * bottom as usize + right as usize)
}

/// Grad-CAM for one preprocessed `(3, H, W)` input.
///
/// Channel weights are the spatial mean of the target logit's gradient at
/// `layer` (default: the model's last feature layer); the weighted sum of
/// activations is rectified, bilinearly upsampled to `H×W` and divided by
/// its maximum.
pub fn grad_cam(model: &Model, input: &Array3<f32>, target_class: usize, layer: Option<&str>) -> Result<Heatmap> {
    let k = model.num_classes();
    if target_class >= k {
        return Err(Error::TargetOutOfRange {
            index: target_class,
            classes: k,
        });
    }
    let layer = match layer {
        Some(l) => model.resolve_layer(l)?,
        None => model.default_feature_layer(),
    };
    let (_, in_h, in_w) = input.dim();
    let x = input.clone().insert_axis(Axis(0));
    let mut scratch = model.clone();
    let (_, cache) = scratch.forward_eval(&x)?;
    let mut grad = Array2::<f32>::zeros((1, k));
    grad[[0, target_class]] = 1.0;
    let stages = scratch.feature_layers();
    let g = scratch
        .backward_to(&cache, &grad, Some(&layer))
        .ok_or_else(|| Error::UnknownLayer(layer.clone()))?;
    let a = cache
        .activation(&layer, &stages)
        .ok_or_else(|| Error::UnknownLayer(layer.clone()))?;
    let (_, c, h, w) = a.dim();
    let mut coarse = Array2::<f32>::zeros((h, w));
    for ch in 0..c {
        let alpha = g.index_axis(Axis(0), 0).index_axis(Axis(0), ch).mean().unwrap_or(0.0);
        coarse.scaled_add(alpha, &a.index_axis(Axis(0), 0).index_axis(Axis(0), ch));
    }
    coarse.mapv_inplace(|v| v.max(0.0));
    let up = resize_bilinear(&coarse.clone().insert_axis(Axis(0)), in_h, in_w).remove_axis(Axis(0));
    let max = up.iter().fold(0.0f32, |m, &v| m.max(v));
    let all_zero = !(max > 0.0);
    let values = if all_zero { Array2::zeros((in_h, in_w)) } else { up.mapv(|v| v / max) };
    Ok(Heatmap {
        values,
        coarse,
        target_class,
        layer_name: layer,
        all_zero,
    })
}

/// Blue-to-red colormap: 0 → dark blue, 0.5 → green, 1 → dark red.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let f = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// The source image blended with the colormapped heatmap at
/// [`OVERLAY_OPACITY`].
pub fn overlay(heatmap: &Heatmap, image: &Image) -> Result<Image> {
    let (h, w) = heatmap.dims();
    if image.channels() != 3 || image.height() != h || image.width() != w {
        return Err(Error::shape(format!(
            "heatmap is {h}×{w}, image is {}×{}×{}",
            image.channels(),
            image.height(),
            image.width()
        )));
    }
    let src = image.pixels();
    let px = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let m = jet(heatmap.values[[y, x]])[c];
        (1.0 - OVERLAY_OPACITY) * src[[c, y, x]] + OVERLAY_OPACITY * m
    });
    Ok(Image::new(px))
}

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::image::{resize_bilinear, Image};
use crate::error::{Error, Result};

/// Resize-and-normalize settings. Defaults are the ImageNet statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_size: 380,
            channel_means: [0.485, 0.456, 0.406],
            channel_stds: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessSpec {
    pub fn new(target_size: usize, channel_means: [f64; 3], channel_stds: [f64; 3]) -> Result<Self> {
        let spec = Self {
            target_size,
            channel_means,
            channel_stds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_size(target_size: usize) -> Result<Self> {
        let d = Self::default();
        Self::new(target_size, d.channel_means, d.channel_stds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::config("target_size must be > 0"));
        }
        if let Some(s) = self.channel_stds.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("channel std {s} must be strictly positive")));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("channel means must be finite"));
        }
        Ok(())
    }
}

/// Bilinear resize to `target_size²`, then per-channel `(x − mean) / std`.
pub fn preprocess(image: &Image, spec: &PreprocessSpec) -> Result<Array3<f32>> {
    spec.validate()?;
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "preprocess expects a 3-channel image, got {} channels",
            image.channels()
        )));
    }
    let s = spec.target_size;
    let mut out = resize_bilinear(image.pixels(), s, s);
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mean = spec.channel_means[c];
        let std = spec.channel_stds[c];
        plane.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
    }
    Ok(out)
}

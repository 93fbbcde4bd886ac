//! Training-only augmentation: flips, rotation with reflect padding, and
//! brightness/contrast jitter, each drawn from a stream keyed by
//! `(seed, epoch, index)`.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, ImageRef, ImageStore};
use super::manifest::{Partition, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotation_limit_deg: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_limit_deg: 20.0,
            brightness_jitter: 0.2,
            contrast_jitter: 0.2,
        }
    }
}

impl AugmentationPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.rotation_limit_deg >= 0.0) {
            return Err(Error::config("rotation_limit_deg must be >= 0"));
        }
        for (name, j) in [
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
        ] {
            if !(0.0..=1.0).contains(&j) {
                return Err(Error::config(format!("{name} = {j} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

/// Concrete transform parameters for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
        brightness: 1.0,
        contrast: 1.0,
    };

    pub fn sample(policy: &AugmentationPolicy, key: AugmentKey) -> Self {
        if !policy.enabled {
            return Self::IDENTITY;
        }
        let mut rng = keyed_rng(Domain::Augment, key.seed, key.epoch, key.index);
        // Draw every parameter unconditionally so the stream layout is fixed.
        let hflip = rng.random::<f64>() < policy.hflip_prob;
        let vflip = rng.random::<f64>() < policy.vflip_prob;
        let u_angle: f64 = rng.random_range(-1.0..=1.0);
        let u_bright: f64 = rng.random_range(-1.0..=1.0);
        let u_contrast: f64 = rng.random_range(-1.0..=1.0);
        Self {
            hflip,
            vflip,
            angle_deg: u_angle * policy.rotation_limit_deg,
            brightness: 1.0 + u_bright * policy.brightness_jitter,
            contrast: 1.0 + u_contrast * policy.contrast_jitter,
        }
    }

    pub fn apply(&self, image: &Image) -> Image {
        let mut px = image.pixels().clone();
        if self.hflip {
            px.invert_axis(Axis(2));
        }
        if self.vflip {
            px.invert_axis(Axis(1));
        }
        let mut px = px.as_standard_layout().into_owned();
        if self.angle_deg != 0.0 {
            px = rotate_reflect(&px, self.angle_deg);
        }
        if self.brightness != 1.0 {
            px.mapv_inplace(|v| (v * self.brightness as f32).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            let mean = gray_mean(&px);
            let c = self.contrast as f32;
            px.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
        }
        Image::new(px)
    }
}

fn gray_mean(px: &Array3<f32>) -> f32 {
    if px.dim().0 == 3 {
        let w = [0.299f32, 0.587, 0.114];
        px.outer_iter()
            .zip(w)
            .map(|(plane, wc)| plane.mean().unwrap_or(0.0) * wc)
            .sum()
    } else {
        px.mean().unwrap_or(0.0)
    }
}

/// Reflect-101 index mapping into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Rotate about the image center by `angle_deg` (counter-clockwise),
/// bilinear sampling, out-of-frame samples filled by reflection.
pub fn rotate_reflect(px: &Array3<f32>, angle_deg: f64) -> Array3<f32> {
    let (c, h, w) = px.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse rotation maps output pixel to source location
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let xa = reflect(x0, w);
            let xb = reflect(x0 + 1, w);
            let ya = reflect(y0, h);
            let yb = reflect(y0 + 1, h);
            for ch in 0..c {
                let top = px[[ch, ya, xa]] * (1.0 - fx) + px[[ch, ya, xb]] * fx;
                let bot = px[[ch, yb, xa]] * (1.0 - fx) + px[[ch, yb, xb]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Produce an augmented derivative of a training record.
pub fn augment(
    record: &SampleRecord,
    policy: &AugmentationPolicy,
    key: AugmentKey,
    store: &ImageStore,
) -> Result<SampleRecord> {
    if record.partition != Partition::Train {
        return Err(Error::Protocol(format!(
            "augmentation requested for {} record {}",
            record.partition, record.provenance_id
        )));
    }
    let source = store.load(&record.image_ref)?;
    let params = AugmentParams::sample(policy, key);
    let image = params.apply(&source);
    let id = format!(
        "{}#aug{}.{}.{}",
        record.provenance_id, key.seed, key.epoch, key.index
    );
    Ok(record.derive(id, ImageRef::Memory(Arc::new(image))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn textured(h: usize, w: usize) -> Image {
        Image::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c * 7 + y * 13 + x * 5) % 17) as f32 / 16.0
        }))
    }

    fn train_record(img: Image) -> SampleRecord {
        let mut r = SampleRecord::raw("a/1.png", "a", ImageRef::Memory(Arc::new(img)));
        r.partition = Partition::Train;
        r
    }

    fn pixels(r: &SampleRecord) -> Array3<f32> {
        match &r.image_ref {
            ImageRef::Memory(img) => img.pixels().clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn disabled_policy_is_identity_with_new_id() {
        let store = ImageStore::new();
        let rec = train_record(textured(6, 7));
        let key = AugmentKey { seed: 1, epoch: 2, index: 3 };
        let out = augment(&rec, &AugmentationPolicy::disabled(), key, &store).unwrap();
        assert_eq!(pixels(&out), pixels(&rec));
        assert_ne!(out.provenance_id, rec.provenance_id);
        assert_eq!(out.origin_id, rec.origin_id);
        assert_eq!(out.class_label, rec.class_label);
    }

    #[test]
    fn hflip_is_involution() {
        let policy = AugmentationPolicy {
            enabled: true,
            hflip_prob: 1.0,
            vflip_prob: 0.0,
            rotation_limit_deg: 0.0,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
        };
        let store = ImageStore::new();
        let rec = train_record(textured(5, 8));
        let key = AugmentKey { seed: 0, epoch: 0, index: 0 };
        let once = augment(&rec, &policy, key, &store).unwrap();
        assert_ne!(pixels(&once), pixels(&rec));
        let twice = augment(&once, &policy, key, &store).unwrap();
        assert_eq!(pixels(&twice), pixels(&rec));
    }

    #[test]
    fn sampled_parameters_within_bounds() {
        let policy = AugmentationPolicy::default();
        for i in 0..1000 {
            let p = AugmentParams::sample(&policy, AugmentKey { seed: 9, epoch: i / 100, index: i });
            assert!(p.angle_deg.abs() <= 20.0);
            assert!((0.8..=1.2).contains(&p.brightness));
            assert!((0.8..=1.2).contains(&p.contrast));
        }
    }

    #[test]
    fn evaluation_records_refused() {
        let store = ImageStore::new();
        for part in [Partition::Val, Partition::Test] {
            let mut rec = train_record(textured(4, 4));
            rec.partition = part;
            let err = augment(&rec, &AugmentationPolicy::default(), AugmentKey { seed: 0, epoch: 0, index: 0 }, &store);
            assert!(matches!(err, Err(Error::Protocol(_))));
        }
    }

    #[test]
    fn same_key_same_output() {
        let store = ImageStore::new();
        let rec = train_record(textured(9, 9));
        let key = AugmentKey { seed: 3, epoch: 1, index: 4 };
        let a = augment(&rec, &AugmentationPolicy::default(), key, &store).unwrap();
        let b = augment(&rec, &AugmentationPolicy::default(), key, &store).unwrap();
        assert_eq!(pixels(&a), pixels(&b));
        assert_eq!(a.provenance_id, b.provenance_id);
    }

    #[test]
    fn rotation_by_zero_and_full_turn() {
        let img = textured(6, 6);
        assert_eq!(rotate_reflect(img.pixels(), 0.0), *img.pixels());
        let r = rotate_reflect(img.pixels(), 360.0);
        for (a, b) in r.iter().zip(img.pixels().iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn quarter_turn_of_square_is_exact_permutation() {
        let img = textured(5, 5);
        let r = rotate_reflect(img.pixels(), 90.0);
        // counter-clockwise quarter turn: out[y][x] = in[x][w-1-y]... check via a corner
        let src = img.pixels();
        for ch in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = src[[ch, x, 4 - y]];
                    assert!((r[[ch, y, x]] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-7, 1), 0);
    }
}

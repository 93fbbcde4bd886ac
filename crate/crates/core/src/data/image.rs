use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use ndarray::Array3;
use parking_lot::Mutex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Decoded image as a `C×H×W` array of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Self {
        Self { pixels }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            Self::new(pixels)
        } else {
            let luma = img.to_luma8();
            let (w, h) = luma.dimensions();
            let pixels = Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                luma.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
            });
            Self::new(pixels)
        }
    }

    pub fn decode(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    /// Quantize to 8-bit RGB. Single-channel images are replicated.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (c, h, w) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.pixels[[ch.min(c - 1), y as usize, x as usize]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Where a record's pixels live. Raw records point at files; derivatives made
/// in memory carry their pixels directly.
#[derive(Clone, Debug)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<Image>),
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageRef::Path(a), ImageRef::Path(b)) => a == b,
            (ImageRef::Memory(a), ImageRef::Memory(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

const MEMORY_PREFIX: &str = "memory:";

impl Serialize for ImageRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ImageRef::Path(p) => s.serialize_str(&p.to_string_lossy()),
            ImageRef::Memory(img) => s.serialize_str(&format!(
                "{MEMORY_PREFIX}{}x{}x{}",
                img.channels(),
                img.height(),
                img.width()
            )),
        }
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.starts_with(MEMORY_PREFIX) {
            return Err(serde::de::Error::custom(
                "in-memory image references cannot be deserialized",
            ));
        }
        Ok(ImageRef::Path(PathBuf::from(s)))
    }
}

/// Decode cache shared by training and evaluation.
#[derive(Default)]
pub struct ImageStore {
    cache: Mutex<HashMap<PathBuf, Arc<Image>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(&self, image_ref: &ImageRef) -> Result<Arc<Image>> {
        match image_ref {
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
            ImageRef::Path(p) => {
                if let Some(img) = self.cache.lock().get(p) {
                    return Ok(Arc::clone(img));
                }
                let img = Arc::new(Image::decode(p)?);
                self.cache.lock().insert(p.clone(), Arc::clone(&img));
                Ok(img)
            }
        }
    }

    /// Pre-populate the cache with an in-memory image at a path key.
    pub fn insert(&self, path: PathBuf, image: Image) {
        self.cache.lock().insert(path, Arc::new(image));
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, sx, w)).collect();
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
        let bot = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

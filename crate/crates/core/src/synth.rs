//! Synthetic class-folder corpus with known localization masks.
//!
//! Class `c` is a filled shape in a class-specific colour, placed inside
//! quadrant `c mod 4` of a grey noise background. Colour makes the task
//! solvable after global pooling; the quadrant gives Grad-CAM a ground truth.
//! Masks live under the hidden `.masks/` directory, which corpus ingestion
//! skips.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Domain};

pub const MASK_DIR: &str = ".masks";
pub const SUMMARY_FILE: &str = "synth.json";

pub const SOLAR_CLASSES: [&str; 6] = [
    "Bird-drop",
    "Clean",
    "Dusty",
    "Electrical-damage",
    "Physical-damage",
    "Snow-covered",
];

/// Raw class distribution of the solar panel corpus, aligned with
/// [`SOLAR_CLASSES`]. Sums to 875.
pub const SOLAR_COUNTS: [usize; 6] = [192, 194, 191, 104, 70, 124];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// `k` classes with `per_class` images each. Six classes take the solar
    /// panel names, other counts are numbered.
    pub fn uniform(k: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            classes: class_names(k),
            counts: vec![per_class; k],
            image_size,
            seed,
        }
    }

    pub fn solar_counts(image_size: usize, seed: u64) -> Self {
        Self {
            classes: class_names(6),
            counts: SOLAR_COUNTS.to_vec(),
            image_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("synthetic corpus needs K >= 2 classes"));
        }
        if self.counts.len() != self.classes.len() {
            return Err(Error::config(format!(
                "{} class counts for {} classes",
                self.counts.len(),
                self.classes.len()
            )));
        }
        if self.image_size < 16 {
            return Err(Error::config("synthetic image_size must be >= 16"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn class_names(k: usize) -> Vec<String> {
    if k == SOLAR_CLASSES.len() {
        SOLAR_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("class{i:02}")).collect()
    }
}

/// Fully saturated hue `c / k` of the colour wheel; for six classes this is
/// red, yellow, green, cyan, blue, magenta.
pub fn class_colour(c: usize, k: usize) -> [f32; 3] {
    let h = 6.0 * c as f32 / k as f32;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub fn class_quadrant(c: usize) -> usize {
    c % 4
}

/// Rows and columns spanned by quadrant `q` of an `h×w` grid.
pub fn quadrant_bounds(q: usize, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (hh, hw) = (h / 2, w / 2);
    let rows = if q < 2 { 0..hh } else { hh..h };
    let cols = if q.is_multiple_of(2) { 0..hw } else { hw..w };
    (rows, cols)
}

/// One image and its binary mask.
pub fn render(spec: &SynthSpec, class: usize, index: usize) -> (Image, Vec<bool>) {
    let s = spec.image_size;
    let k = spec.classes.len();
    let mut rng = keyed_rng(Domain::Synth, spec.seed, class as u64, index as u64);
    let base: f32 = rng.random_range(0.3..0.6);
    let mut px = Array3::<f32>::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let g = base + rng.random_range(-0.12..0.12);
            for c in 0..3 {
                px[[c, y, x]] = (g + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }
    let (rows, cols) = quadrant_bounds(class_quadrant(class), s, s);
    let half = s / 2;
    let size = rng.random_range(half * 2 / 5..=half * 3 / 4).max(3);
    let margin = 1;
    let top = rows.start + rng.random_range(margin..=(half - size - margin).max(margin));
    let left = cols.start + rng.random_range(margin..=(half - size - margin).max(margin));
    let disc = rng.random_bool(0.5);
    let shade: f32 = rng.random_range(0.75..1.0);
    let colour = class_colour(class, k);
    let mut mask = vec![false; s * s];
    let r = size as f32 / 2.0;
    let (cy, cx) = (top as f32 + r - 0.5, left as f32 + r - 0.5);
    for y in top..(top + size).min(s) {
        for x in left..(left + size).min(s) {
            let inside = !disc || {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                dy * dy + dx * dx <= r * r
            };
            if inside {
                mask[y * s + x] = true;
                let n: f32 = rng.random_range(-0.05..0.05);
                for c in 0..3 {
                    px[[c, y, x]] = (colour[c] * shade + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    (Image::new(px), mask)
}

fn file_stem(class: &str, index: usize) -> String {
    format!("{}_{index:04}", class.to_lowercase())
}

/// Mask location for a corpus record: `<root>/.masks/<class>/<stem>.png`.
pub fn mask_path(root: &Path, record: &SampleRecord) -> Option<PathBuf> {
    let file = record.provenance_id.rsplit('/').next()?;
    let stem = Path::new(file).file_stem()?.to_str()?;
    Some(root.join(MASK_DIR).join(&record.class_label).join(format!("{stem}.png")))
}

pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.pixels().map(|p| p[0] > 127).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub spec: SynthSpec,
    pub images: usize,
    pub root: PathBuf,
}

fn is_empty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Write the corpus. A non-empty `out` is refused unless `force`, in which
/// case the class folders, masks and summary written by a previous run are
/// replaced.
pub fn generate(spec: &SynthSpec, out: &Path, force: bool) -> Result<SynthSummary> {
    spec.validate()?;
    if !is_empty_dir(out)? {
        if !force {
            return Err(Error::Protocol(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for name in spec.classes.iter().map(String::as_str).chain([MASK_DIR]) {
            let d = out.join(name);
            if d.is_dir() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    for (ci, class) in spec.classes.iter().enumerate() {
        let dir = out.join(class);
        let mask_dir = out.join(MASK_DIR).join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for i in 0..spec.counts[ci] {
            let (img, mask) = render(spec, ci, i);
            let stem = file_stem(class, i);
            img.save_png(&dir.join(format!("{stem}.png")))?;
            let s = spec.image_size as u32;
            let m = GrayImage::from_fn(s, s, |x, y| Luma([if mask[(y * s + x) as usize] { 255 } else { 0 }]));
            let mp = mask_dir.join(format!("{stem}.png"));
            m.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;
        }
    }
    let summary = SynthSummary {
        spec: spec.clone(),
        images: spec.total(),
        root: out.to_path_buf(),
    };
    let p = out.join(SUMMARY_FILE);
    fs::write(&p, serde_json::to_string_pretty(&spec)?).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

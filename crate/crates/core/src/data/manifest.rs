use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::ImageRef;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Partition {
    pub fn is_evaluation(self) -> bool {
        matches!(self, Partition::Val | Partition::Test)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
            Partition::Unassigned => "unassigned",
        }
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image with its label and provenance. Derivatives (oversampled
/// duplicates, augmentations) keep the `origin_id` of the raw image they
/// descend from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub provenance_id: String,
    pub origin_id: String,
    pub class_label: String,
    pub image_ref: ImageRef,
    pub partition: Partition,
}

impl SampleRecord {
    pub fn raw(provenance_id: impl Into<String>, class_label: impl Into<String>, image_ref: ImageRef) -> Self {
        let provenance_id = provenance_id.into();
        Self {
            origin_id: provenance_id.clone(),
            provenance_id,
            class_label: class_label.into(),
            image_ref,
            partition: Partition::Unassigned,
        }
    }

    pub fn is_derivative(&self) -> bool {
        self.origin_id != self.provenance_id
    }

    /// A derivative of this record with a fresh identity.
    pub fn derive(&self, provenance_id: String, image_ref: ImageRef) -> Self {
        Self {
            provenance_id,
            origin_id: self.origin_id.clone(),
            class_label: self.class_label.clone(),
            image_ref,
            partition: self.partition,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    classes: Vec<String>,
    records: Vec<SampleRecord>,
    counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::config(format!(
                "a manifest needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut seen_class = HashSet::new();
        for c in &classes {
            if !seen_class.insert(c.as_str()) {
                return Err(Error::config(format!("duplicate class `{c}`")));
            }
        }
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut counts = vec![0; classes.len()];
        let mut ids = HashSet::new();
        for r in &records {
            let Some(&ci) = index.get(r.class_label.as_str()) else {
                return Err(Error::ClassPrecondition {
                    class: r.class_label.clone(),
                    reason: format!("record {} has a label outside the class list", r.provenance_id),
                });
            };
            if !ids.insert(r.provenance_id.as_str()) {
                return Err(Error::Protocol(format!("duplicate provenance id {}", r.provenance_id)));
            }
            counts[ci] += 1;
        }
        Ok(Self { classes, records, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-class tallies aligned with [`classes`](Self::classes).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count_of(&self, class: &str) -> Option<usize> {
        self.class_index(class).map(|i| self.counts[i])
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    pub fn records_of<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.records.iter().filter(move |r| r.class_label == class)
    }

    pub fn to_jsonl(&self) -> String {
        records_to_jsonl(&self.records)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_hidden(name: &str) -> bool {
    name.starts_with('.')
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.retain(|e| !is_hidden(&e.file_name().to_string_lossy()));
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Scan a directory-of-class-folders corpus. Hidden entries are ignored.
/// Class order is `expected_classes` when given, else lexicographic.
pub fn load_manifest(root: &Path, expected_classes: Option<&[String]>) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    let class_dirs: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::NoClassDirectories(root.to_path_buf()));
    }
    let classes: Vec<String> = match expected_classes {
        Some(expected) => {
            if let Some(extra) = class_dirs.iter().find(|d| !expected.contains(d)) {
                return Err(Error::ClassPrecondition {
                    class: extra.clone(),
                    reason: "directory is not in the expected class list".into(),
                });
            }
            if let Some(missing) = expected.iter().find(|c| !class_dirs.contains(c)) {
                return Err(Error::EmptyClass { class: missing.clone() });
            }
            expected.to_vec()
        }
        None => class_dirs,
    };

    let mut records = Vec::new();
    let mut unreadable = Vec::new();
    for class in &classes {
        let dir = root.join(class);
        let files: Vec<_> = sorted_entries(&dir)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass { class: class.clone() });
        }
        for path in files {
            if image::image_dimensions(&path).is_err() {
                unreadable.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            records.push(SampleRecord::raw(format!("{class}/{name}"), class.clone(), ImageRef::Path(path)));
        }
    }
    if !unreadable.is_empty() {
        return Err(Error::UnreadableImages { files: unreadable });
    }
    DatasetManifest::new(classes, records)
}

pub fn records_to_jsonl(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(records_to_jsonl(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

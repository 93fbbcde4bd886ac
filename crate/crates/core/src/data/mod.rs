//! Corpus ingestion and the split-before-augment protocol.

pub mod augment;
pub mod image;
pub mod leakage;
pub mod manifest;
pub mod preprocess;
pub mod split;

pub use augment::{augment, AugmentKey, AugmentParams, AugmentationPolicy};
pub use image::{resize_bilinear, Image, ImageRef, ImageStore};
pub use leakage::{verify_no_leakage, LeakageReport, LeakageViolation};
pub use manifest::{load_manifest, read_jsonl, records_to_jsonl, write_jsonl, DatasetManifest, Partition, SampleRecord};
pub use preprocess::{preprocess, PreprocessSpec};
pub use split::{balance_by_oversampling, stratified_split, DatasetSplits, SplitSpec};

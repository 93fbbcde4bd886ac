use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no class directories found under {0}")]
    NoClassDirectories(PathBuf),

    #[error("class directory for `{class}` is missing or empty")]
    EmptyClass { class: String },

    #[error("unreadable image files: {}", .files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    UnreadableImages { files: Vec<PathBuf> },

    #[error("class `{class}`: {reason}")]
    ClassPrecondition { class: String, reason: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("leakage audit failed: {}", .violations.join(", "))]
    LeakageDetected { violations: Vec<String> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("backbone `{name}` is not available in this build")]
    BackboneUnavailable { name: String },

    #[error("pretrained weights for backbone `{name}` are unavailable; set pretrained = false")]
    PretrainedUnavailable { name: String },

    #[error("unknown feature layer `{0}`")]
    UnknownLayer(String),

    #[error("compute device busy: {0}")]
    DeviceBusy(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

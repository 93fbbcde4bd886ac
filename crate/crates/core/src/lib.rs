pub mod benchmark;
pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod device;
pub mod error;
pub mod evaluation;
pub mod explainability;
pub mod model;
pub mod nn;
pub mod optimization;
pub mod plot;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

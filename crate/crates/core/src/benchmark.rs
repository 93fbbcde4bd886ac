//! Throughput, size and training-time measurement.

use std::fs;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use ndarray::{Array, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelCheckpoint;
use crate::data::{DatasetSplits, ImageStore};
use crate::device;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{keyed_rng, Domain};
use crate::training::{train_with_store, TrainConfig, TrainHistory};

pub const MEASUREMENT: &str = "pure forward pass on synthetic inputs, preprocessing excluded";

/// Anything that can run one inference batch.
pub trait BatchModel {
    fn run_batch(&self, x: &Array4<f32>) -> Result<()>;
}

impl BatchModel for Model {
    fn run_batch(&self, x: &Array4<f32>) -> Result<()> {
        self.predict_logits(x).map(|_| ())
    }
}

/// Stub that sleeps a fixed latency per batch.
#[derive(Clone, Copy, Debug)]
pub struct ConstantLatencyModel {
    pub latency: Duration,
}

impl BatchModel for ConstantLatencyModel {
    fn run_batch(&self, _x: &Array4<f32>) -> Result<()> {
        thread::sleep(self.latency);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkProtocol {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub input_size: usize,
    /// How long to wait for running training jobs to release the device.
    pub device_wait_s: f64,
}

impl Default for BenchmarkProtocol {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup_iters: 10,
            timed_iters: 50,
            input_size: 380,
            device_wait_s: 600.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub model: String,
    pub fps: f64,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub input_size: usize,
    pub timed_s: f64,
    pub size_mb: Option<f64>,
    pub train_time_s: Option<f64>,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub hardware_label: String,
    pub measurement: String,
}

impl BenchmarkResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("benchmark result serializes")
    }
}

/// OS, architecture, logical CPU count and (on Linux) the CPU model name.
pub fn hardware_label() -> String {
    let cpus = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {} / {cpu} / {cpus} logical cpus / single-threaded GEMM",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

fn synthetic_batch(p: &BenchmarkProtocol) -> Array4<f32> {
    let mut rng = keyed_rng(Domain::Synth, u64::MAX, 0, 0);
    Array::from_shape_simple_fn((p.batch_size, 3, p.input_size, p.input_size), || rng.random_range(-2.0..2.0))
}

/// Frames per second over `timed_iters` batches after `warmup_iters`
/// untimed ones. Holds the device exclusively for the whole measurement.
pub fn measure_fps(model: &dyn BatchModel, label: &str, protocol: &BenchmarkProtocol) -> Result<BenchmarkResult> {
    if protocol.timed_iters < 1 {
        return Err(Error::config("timed_iters must be >= 1"));
    }
    if protocol.batch_size < 1 || protocol.input_size < 1 {
        return Err(Error::config("batch_size and input_size must be >= 1"));
    }
    let x = synthetic_batch(protocol);
    let _device = device::exclusive(Duration::from_secs_f64(protocol.device_wait_s.max(0.0)))?;
    for _ in 0..protocol.warmup_iters {
        model.run_batch(&x)?;
    }
    let t0 = Instant::now();
    for _ in 0..protocol.timed_iters {
        // Every batch call returns only after its compute has finished.
        model.run_batch(&x)?;
    }
    let timed_s = t0.elapsed().as_secs_f64();
    Ok(BenchmarkResult {
        model: label.to_string(),
        fps: (protocol.timed_iters * protocol.batch_size) as f64 / timed_s,
        batch_size: protocol.batch_size,
        warmup_iters: protocol.warmup_iters,
        timed_iters: protocol.timed_iters,
        input_size: protocol.input_size,
        timed_s,
        size_mb: None,
        train_time_s: None,
        checkpoint: None,
        checkpoint_sha256: None,
        hardware_label: hardware_label(),
        measurement: MEASUREMENT.into(),
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn measure_size(checkpoint: &ModelCheckpoint) -> f64 {
    checkpoint.size_bytes() as f64 / (1u64 << 20) as f64
}

/// Benchmark a checkpoint file. The file is hashed before and after; a
/// changed hash is reported as an error.
pub fn bench_checkpoint(path: &Path, protocol: &BenchmarkProtocol) -> Result<BenchmarkResult> {
    let before = sha256_file(path)?;
    let ck = ModelCheckpoint::load(path)?;
    let model = ck.to_model()?;
    let mut result = measure_fps(&model, &ck.spec.label(), protocol)?;
    result.size_mb = Some(measure_size(&ck));
    let after = sha256_file(path)?;
    if before != after {
        return Err(Error::Checkpoint(format!("{} changed during benchmarking", path.display())));
    }
    result.checkpoint = Some(path.display().to_string());
    result.checkpoint_sha256 = Some(after);
    Ok(result)
}

/// Wall-clock seconds around `f` on a monotonic clock.
pub fn timed<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, f64)> {
    let t0 = Instant::now();
    let r = f()?;
    Ok((r, t0.elapsed().as_secs_f64()))
}

pub fn time_training(
    config: &TrainConfig,
    splits: &DatasetSplits,
    store: &ImageStore,
) -> Result<(ModelCheckpoint, TrainHistory, f64)> {
    let ((ck, history), secs) = timed(|| train_with_store(config, splits, store))?;
    Ok((ck, history, secs))
}

//! Process-wide compute-device arbitration. Training runs share the device;
//! timing runs need it exclusively.

use std::time::Duration;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

static DEVICE: RwLock<()> = RwLock::new(());

/// Recursive, so nested jobs on one worker thread cannot deadlock behind a
/// waiting benchmark.
pub fn shared() -> RwLockReadGuard<'static, ()> {
    DEVICE.read_recursive()
}

/// Wait up to `wait` for every training run to finish.
pub fn exclusive(wait: Duration) -> Result<RwLockWriteGuard<'static, ()>> {
    DEVICE.try_write_for(wait).ok_or_else(|| {
        Error::DeviceBusy(format!(
            "training is running in this process; benchmark refused after waiting {:.1} s",
            wait.as_secs_f64()
        ))
    })
}

//! Focal loss, the cross-entropy baseline, and the learning-rate schedule.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{cast, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal,
    CrossEntropy,
}

/// Loss selection. `gamma` and `alpha` are ignored for cross-entropy so that
/// switching `kind` is a single-field change.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Focal,
            gamma: 2.0,
            alpha: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossSpec {
    pub fn focal(&self) -> FocalLossSpec {
        match self.kind {
            LossKind::Focal => FocalLossSpec {
                gamma: self.gamma,
                alpha: self.alpha,
                reduction: self.reduction,
            },
            LossKind::CrossEntropy => FocalLossSpec {
                gamma: 0.0,
                alpha: 1.0,
                reduction: self.reduction,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.focal().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalLossSpec {
    pub gamma: f64,
    pub alpha: f64,
    pub reduction: Reduction,
}

impl Default for FocalLossSpec {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl FocalLossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("focal alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn log_softmax<T: Scalar>(row: ArrayView1<'_, T>) -> Array1<T> {
    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
    row.mapv(|v| v - lse)
}

fn check_targets(logits_rows: usize, classes: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != logits_rows {
        return Err(Error::shape(format!(
            "{} targets for a batch of {logits_rows}",
            targets.len()
        )));
    }
    if logits_rows == 0 {
        return Err(Error::shape("empty batch"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::TargetOutOfRange { index: bad, classes });
    }
    Ok(())
}

/// Unreduced per-sample focal loss `-α (1 - p_t)^γ log p_t`.
pub fn focal_loss_per_sample<T: Scalar>(
    logits: &Array2<T>,
    targets: &[usize],
    spec: &FocalLossSpec,
) -> Result<Array1<T>> {
    spec.validate()?;
    check_targets(logits.nrows(), logits.ncols(), targets)?;
    let alpha: T = cast(spec.alpha);
    let gamma: T = cast(spec.gamma);
    Ok(Array1::from_iter(logits.outer_iter().zip(targets).map(|(row, &t)| {
        let logp = log_softmax(row)[t];
        let p = logp.exp();
        let modulator = if spec.gamma == 0.0 { T::one() } else { (T::one() - p).powf(gamma) };
        -alpha * modulator * logp
    })))
}

fn reduce<T: Scalar>(per_sample: &Array1<T>, reduction: Reduction) -> T {
    match reduction {
        Reduction::Mean => per_sample.sum() / cast(per_sample.len() as f64),
        Reduction::Sum => per_sample.sum(),
    }
}

pub fn focal_loss<T: Scalar>(logits: &Array2<T>, targets: &[usize], spec: &FocalLossSpec) -> Result<T> {
    Ok(reduce(&focal_loss_per_sample(logits, targets, spec)?, spec.reduction))
}

/// Mean negative log-likelihood of the log-softmax.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> Result<T> {
    check_targets(logits.nrows(), logits.ncols(), targets)?;
    let total = logits
        .outer_iter()
        .zip(targets)
        .fold(T::zero(), |acc, (row, &t)| acc - log_softmax(row)[t]);
    Ok(total / cast(targets.len() as f64))
}

/// Loss value and its gradient with respect to the logits.
///
/// With `p = p_t` and `L = -α (1-p)^γ log p`, the logit gradient is
/// `dL/dz_j = -α [ (1-p)^γ - γ p (1-p)^(γ-1) log p ] (δ_jt - p_j)`.
pub fn focal_loss_with_grad<T: Scalar>(
    logits: &Array2<T>,
    targets: &[usize],
    spec: &FocalLossSpec,
) -> Result<(T, Array2<T>)> {
    spec.validate()?;
    check_targets(logits.nrows(), logits.ncols(), targets)?;
    let alpha: T = cast(spec.alpha);
    let gamma: T = cast(spec.gamma);
    let scale: T = match spec.reduction {
        Reduction::Mean => T::one() / cast(targets.len() as f64),
        Reduction::Sum => T::one(),
    };
    let mut grad = Array2::<T>::zeros(logits.raw_dim());
    let mut total = T::zero();
    for ((row, &t), mut g) in logits.outer_iter().zip(targets).zip(grad.outer_iter_mut()) {
        let logp_all = log_softmax(row);
        let probs = logp_all.mapv(|v| v.exp());
        let logp = logp_all[t];
        let p = probs[t];
        let q = T::one() - p;
        let (modulator, coef) = if spec.gamma == 0.0 {
            (T::one(), T::one())
        } else {
            let m = q.powf(gamma);
            // q^(γ-1) is singular at q = 0 for γ < 1; the product with p·log p vanishes there.
            let dm = if q > T::zero() { gamma * q.powf(gamma - T::one()) * p * logp } else { T::zero() };
            (m, m - dm)
        };
        total -= alpha * modulator * logp;
        for j in 0..g.len() {
            let delta = if j == t { T::one() } else { T::zero() };
            g[j] = -alpha * coef * (delta - probs[j]) * scale;
        }
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Cosine,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Horizon `T` in epochs.
    pub horizon: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Cosine,
            lr_max: 1e-4,
            lr_min: 0.0,
            horizon: 15,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("schedule horizon must be >= 1"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max > 0.0) {
            return Err(Error::config(format!(
                "need 0 <= lr_min <= lr_max and lr_max > 0 (lr_min = {}, lr_max = {})",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// Learning rate at epoch `t ∈ [0, T]`.
pub fn lr_at(epoch: usize, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if epoch > spec.horizon {
        return Err(Error::config(format!(
            "epoch {epoch} outside schedule horizon [0, {}]",
            spec.horizon
        )));
    }
    Ok(match spec.mode {
        ScheduleMode::Fixed => spec.lr_max,
        ScheduleMode::Cosine => {
            let frac = epoch as f64 / spec.horizon as f64;
            spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    })
}

/// AdamW settings. The learning rate itself comes from [`ScheduleSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self) -> crate::nn::AdamW<T> {
        crate::nn::AdamW::new(self.weight_decay, self.beta1, self.beta2, self.eps)
    }
}

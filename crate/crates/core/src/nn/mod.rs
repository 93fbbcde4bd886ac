//! Minimal layer library with explicit backward passes.
//!
//! Every layer splits into a `forward` that returns its output together with
//! a cache, and a `backward` that consumes the cache, accumulates parameter
//! gradients and returns the gradient with respect to its input. Layers are
//! generic over [`Scalar`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference gradient checks.

mod conv;
mod layers;
mod optim;

pub use conv::{Conv2d, ConvCache};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnCache, Dropout, DropoutCache,
    LeakyRelu, Linear, LinearCache, MaxPool2, PoolCache,
};
pub use optim::AdamW;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("value representable in scalar type")
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// A tensor of weights plus its accumulated gradient. Non-trainable
/// parameters (batch-norm running statistics) ride along for serialization
/// and are skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Fan-in scaled uniform initialization in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            cast(rng.random_range(-bound..=bound))
        });
        Self::new(value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Forward-pass mode. Training carries the RNG that drives dropout masks so a
/// fixed key reproduces the same stochastic forward.
pub enum Phase<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

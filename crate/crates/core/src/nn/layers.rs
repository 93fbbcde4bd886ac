use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix2};
use rand::Rng;

use super::{cast, Param, Phase, Scalar};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct LinearCache<T> {
    input: Array2<T>,
}

impl<T: Scalar> LinearCache<T> {
    pub(crate) fn empty() -> Self {
        Self {
            input: Array2::zeros((0, 0)),
        }
    }
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::zeros(&[out_features]),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_features, in_features]),
            bias: Param::zeros(&[out_features]),
        }
    }

    pub fn from_weights(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape(format!(
                "linear weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn b(&self) -> ndarray::ArrayView1<'_, T> {
        self.bias.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LinearCache<T>) {
        assert_eq!(x.ncols(), self.in_features(), "linear input features");
        let y = x.dot(&self.w().t()) + self.b();
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, grad_out: &Array2<T>) -> Array2<T> {
        let dw = grad_out.t().dot(&cache.input);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        grad_out.dot(&self.w())
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub(crate) fn params(&self) -> [(&'static str, &Param<T>); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: f64,
    momentum: f64,
}

pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels).into_dyn()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(Array1::zeros(channels).into_dyn()),
            running_var: Param::buffer(Array1::ones(channels).into_dyn()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn vec(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
        p.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    fn normalize(&self, x: &Array4<T>, mean: &Array1<T>, inv_std: &Array1<T>) -> (Array4<T>, Array4<T>) {
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let mut xhat = x.clone();
        for mut img in xhat.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                let (m, s) = (mean[c], inv_std[c]);
                plane.mapv_inplace(|v| (v - m) * s);
            }
        }
        let mut y = xhat.clone();
        for mut img in y.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                let (g, b) = (gamma[c], beta[c]);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (y, xhat)
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let plane = x.index_axis(Axis(1), ci);
            let m = plane.sum() / cast(count);
            let v = plane.fold(T::zero(), |acc, &e| acc + (e - m) * (e - m)) / cast(count);
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std = var.mapv(|v| T::one() / (v + cast(self.eps)).sqrt());
        let (y, xhat) = self.normalize(x, &mean, &inv_std);

        let mom: T = cast(self.momentum);
        let unbias: T = if count > 1.0 { cast(count / (count - 1.0)) } else { T::one() };
        let mut rm = self.running_mean.value.view_mut().into_dimensionality::<Ix1>().unwrap();
        let mut rv = self.running_var.value.view_mut().into_dimensionality::<Ix1>().unwrap();
        for ci in 0..c {
            rm[ci] = (T::one() - mom) * rm[ci] + mom * mean[ci];
            rv[ci] = (T::one() - mom) * rv[ci] + mom * var[ci] * unbias;
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: true,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let mean = Self::vec(&self.running_mean).to_owned();
        let inv_std = Self::vec(&self.running_var).mapv(|v| T::one() / (v + cast(self.eps)).sqrt());
        let (y, xhat) = self.normalize(x, &mean, &inv_std);
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: false,
            },
        )
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad_out.dim();
        let count: T = cast((n * h * w) as f64);
        let gamma = Self::vec(&self.gamma).to_owned();
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        for ci in 0..c {
            let g = grad_out.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            dbeta[ci] = g.sum();
            dgamma[ci] = (&g * &xh).sum();
        }
        let mut dx = grad_out.clone();
        for mut img in dx.outer_iter_mut() {
            for (ci, mut plane) in img.outer_iter_mut().enumerate() {
                let scale = gamma[ci] * cache.inv_std[ci];
                plane.mapv_inplace(|v| v * scale);
            }
        }
        if cache.train {
            // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            for ci in 0..c {
                let scale = gamma[ci] * cache.inv_std[ci] / count;
                let (sb, sg) = (dbeta[ci], dgamma[ci]);
                let g = grad_out.index_axis(Axis(1), ci);
                let xh = cache.xhat.index_axis(Axis(1), ci);
                let mut d = dx.index_axis_mut(Axis(1), ci);
                ndarray::Zip::from(&mut d).and(&g).and(&xh).for_each(|d, &g, &xh| {
                    *d = scale * (count * g - sb - xh * sg);
                });
            }
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 4] {
        [
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    pub(crate) fn params(&self) -> [(&'static str, &Param<T>); 4] {
        [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }
}

/// Leaky rectifier; a slope of zero gives the plain rectifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let s: T = cast(self.slope);
        (x.mapv(|v| if v > T::zero() { v } else { v * s }), x.clone())
    }

    pub fn backward<T: Scalar>(&self, input: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
        let s: T = cast(self.slope);
        let mut dx = grad_out.clone();
        ndarray::Zip::from(&mut dx).and(input).for_each(|d, &x| {
            if x <= T::zero() {
                *d *= s;
            }
        });
        dx
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaxPool2;

pub struct PoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        (
            Array4::from_shape_vec((n, c, oh, ow), out).unwrap(),
            PoolCache {
                argmax,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &PoolCache, grad_out: &Array4<T>) -> Array4<T> {
        let mut dx = vec![T::zero(); cache.input_dim.0 * cache.input_dim.1 * cache.input_dim.2 * cache.input_dim.3];
        let g = grad_out.as_standard_layout();
        for (&i, &gv) in cache.argmax.iter().zip(g.iter()) {
            dx[i] += gv;
        }
        Array4::from_shape_vec(cache.input_dim, dx).unwrap()
    }
}

/// Spatial mean per channel, `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let area: T = cast((h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = x.slice(ndarray::s![ni, ci, .., ..]).sum() / area;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = grad_out.dim();
    let area: T = cast((h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| grad_out[[ni, ci]] / area)
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` in
/// training so evaluation is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

pub struct DropoutCache<T> {
    mask: Option<Array2<T>>,
}

impl<T> DropoutCache<T> {
    pub(crate) fn identity() -> Self {
        Self { mask: None }
    }
}

impl Dropout {
    pub fn forward<T: Scalar>(&self, x: &Array2<T>, phase: &mut Phase<'_>) -> (Array2<T>, DropoutCache<T>) {
        match phase {
            Phase::Train(rng) if self.p > 0.0 => {
                let keep: T = cast(1.0 / (1.0 - self.p));
                let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                    if rng.random::<f64>() < self.p {
                        T::zero()
                    } else {
                        keep
                    }
                });
                (x * &mask, DropoutCache { mask: Some(mask) })
            }
            _ => (x.clone(), DropoutCache { mask: None }),
        }
    }

    pub fn backward<T: Scalar>(&self, cache: &DropoutCache<T>, grad_out: &Array2<T>) -> Array2<T> {
        match &cache.mask {
            Some(m) => grad_out * m,
            None => grad_out.clone(),
        }
    }
}

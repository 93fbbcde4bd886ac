//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! Channel gate: `M_c = σ(MLP(avgpool(F)) + MLP(maxpool(F)))`, the two-layer
//! rectifier MLP shared between both pooled descriptors.
//! Spatial gate: `M_s = σ(conv_k([mean_c(F'); max_c(F')]))` with same padding.
//! Output: `F'' = M_s ⊙ (M_c ⊙ F)`.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, Axis, Ix2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{cast, sigmoid, Conv2d, ConvCache, Linear, LinearCache, Param, Scalar};

pub const DEFAULT_REDUCTION_RATIO: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams<T> {
    pub reduction_ratio: usize,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn new(channels: usize, reduction_ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = hidden_width(channels, reduction_ratio)?;
        let mut fc1: Linear<T> = Linear::new(channels, hidden, rng);
        // Pooled descriptors of rectified features are non-negative; a row
        // with negative sum would start (and likely stay) inactive.
        let mut w = fc1.weight.value.view_mut().into_dimensionality::<Ix2>().unwrap();
        for mut row in w.outer_iter_mut() {
            if row.sum() < T::zero() {
                row.mapv_inplace(|v| -v);
            }
        }
        Ok(Self {
            reduction_ratio,
            fc1,
            fc2: Linear::new(hidden, channels, rng),
        })
    }

    pub fn zeros(channels: usize, reduction_ratio: usize) -> Result<Self> {
        let hidden = hidden_width(channels, reduction_ratio)?;
        Ok(Self {
            reduction_ratio,
            fc1: Linear::zeros(channels, hidden),
            fc2: Linear::zeros(hidden, channels),
        })
    }

    /// Explicit MLP weights: `w1` is `(hidden, C)`, `w2` is `(C, hidden)`.
    pub fn from_weights(w1: Array2<T>, b1: Array1<T>, w2: Array2<T>, b2: Array1<T>) -> Result<Self> {
        if w1.nrows() != w2.ncols() || w1.ncols() != w2.nrows() {
            return Err(Error::shape(format!(
                "MLP layers {:?} and {:?} do not compose to C -> hidden -> C",
                w1.dim(),
                w2.dim()
            )));
        }
        let (hidden, channels) = w1.dim();
        Ok(Self {
            reduction_ratio: (channels / hidden).max(1),
            fc1: Linear::from_weights(w1, b1)?,
            fc2: Linear::from_weights(w2, b2)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }
}

fn hidden_width(channels: usize, reduction_ratio: usize) -> Result<usize> {
    if channels == 0 || reduction_ratio == 0 {
        return Err(Error::config(format!(
            "channel attention needs C >= 1 and r >= 1 (C = {channels}, r = {reduction_ratio})"
        )));
    }
    Ok((channels / reduction_ratio).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    pub fn new(kernel_size: usize, rng: &mut impl Rng) -> Result<Self> {
        // Fan-in bound, as for the MLP.
        let mut conv = Conv2d::zeros(2, 1, kernel_size)?;
        let bound = 1.0 / ((2 * kernel_size * kernel_size) as f64).sqrt();
        conv.weight = Param::uniform(&[1, 2, kernel_size, kernel_size], bound, rng);
        Ok(Self { conv })
    }

    pub fn zeros(kernel_size: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::zeros(2, 1, kernel_size)?,
        })
    }

    /// `weight` has shape `(1, 2, k, k)`; input channel 0 is the channel-mean
    /// map, channel 1 the channel-max map.
    pub fn from_weights(weight: Array4<T>, bias: T) -> Result<Self> {
        let (o, i, _, _) = weight.dim();
        if o != 1 || i != 2 {
            return Err(Error::shape(format!(
                "spatial attention kernel must be (1, 2, k, k), got {:?}",
                weight.dim()
            )));
        }
        Ok(Self {
            conv: Conv2d::from_weights(weight, Array1::from_elem(1, bias))?,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.conv.kernel()
    }
}

/// The full attention block as a trainable layer over `(N, C, H, W)` batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbam<T> {
    pub channel: ChannelAttentionParams<T>,
    pub spatial: SpatialAttentionParams<T>,
}

struct ChannelCache<T> {
    max_idx: Array2<usize>,
    fc1: LinearCache<T>,
    hidden_pre: Array2<T>,
    fc2: LinearCache<T>,
    gate: Array2<T>,
}

struct SpatialCache<T> {
    max_idx: Array3<usize>,
    conv: ConvCache<T>,
    gate: Array4<T>,
}

pub struct CbamCache<T> {
    input: Array4<T>,
    refined: Array4<T>,
    channel: ChannelCache<T>,
    spatial: SpatialCache<T>,
}

impl<T: Scalar> CbamCache<T> {
    pub fn channel_gate(&self) -> &Array2<T> {
        &self.channel.gate
    }

    /// Spatial gate, shape `(N, 1, H, W)`.
    pub fn spatial_gate(&self) -> &Array4<T> {
        &self.spatial.gate
    }
}

impl<T: Scalar> Cbam<T> {
    pub fn new(channels: usize, reduction_ratio: usize, kernel_size: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::new(channels, reduction_ratio, rng)?,
            spatial: SpatialAttentionParams::new(kernel_size, rng)?,
        })
    }

    pub fn zeros(channels: usize, reduction_ratio: usize, kernel_size: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::zeros(channels, reduction_ratio)?,
            spatial: SpatialAttentionParams::zeros(kernel_size)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.channels()
    }

    pub fn check_input(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dim;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "feature map has {c} channels, attention parameters expect {}",
                self.channels()
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("feature map must have H, W >= 1"));
        }
        Ok(())
    }

    fn channel_forward(&self, x: &Array4<T>) -> ChannelCache<T> {
        let (n, c, h, w) = x.dim();
        let area: T = cast((h * w) as f64);
        let mut avg = Array2::<T>::zeros((n, c));
        let mut mx = Array2::<T>::zeros((n, c));
        let mut max_idx = Array2::<usize>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.slice(s![ni, ci, .., ..]);
                let mut best = (0usize, T::neg_infinity());
                let mut sum = T::zero();
                for (i, &v) in plane.iter().enumerate() {
                    sum += v;
                    if v > best.1 {
                        best = (i, v);
                    }
                }
                avg[[ni, ci]] = sum / area;
                mx[[ni, ci]] = best.1;
                max_idx[[ni, ci]] = best.0;
            }
        }
        // Both descriptors go through the shared MLP as one stacked batch.
        let stacked = concatenate(Axis(0), &[avg.view(), mx.view()]).unwrap();
        let (hidden_pre, fc1) = self.channel.fc1.forward(&stacked);
        let hidden = hidden_pre.mapv(|v| v.max(T::zero()));
        let (z, fc2) = self.channel.fc2.forward(&hidden);
        let logits = &z.slice(s![..n, ..]) + &z.slice(s![n.., ..]);
        let gate = logits.mapv(sigmoid);
        ChannelCache {
            max_idx,
            fc1,
            hidden_pre,
            fc2,
            gate,
        }
    }

    fn spatial_forward(&self, x: &Array4<T>) -> SpatialCache<T> {
        let (n, c, h, w) = x.dim();
        let cc: T = cast(c as f64);
        let mut pooled = Array4::<T>::zeros((n, 2, h, w));
        let mut max_idx = Array3::<usize>::zeros((n, h, w));
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let mut sum = T::zero();
                    let mut best = (0usize, T::neg_infinity());
                    for ci in 0..c {
                        let v = x[[ni, ci, y, xx]];
                        sum += v;
                        if v > best.1 {
                            best = (ci, v);
                        }
                    }
                    pooled[[ni, 0, y, xx]] = sum / cc;
                    pooled[[ni, 1, y, xx]] = best.1;
                    max_idx[[ni, y, xx]] = best.0;
                }
            }
        }
        let (logits, conv) = self.spatial.conv.forward(&pooled);
        SpatialCache {
            max_idx,
            conv,
            gate: logits.mapv(sigmoid),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, CbamCache<T>) {
        let channel = self.channel_forward(x);
        let mut refined = x.clone();
        for (mut img, gates) in refined.outer_iter_mut().zip(channel.gate.outer_iter()) {
            for (mut plane, &g) in img.outer_iter_mut().zip(gates.iter()) {
                plane.mapv_inplace(|v| v * g);
            }
        }
        let spatial = self.spatial_forward(&refined);
        let mut out = refined.clone();
        for (mut img, gate) in out.outer_iter_mut().zip(spatial.gate.outer_iter()) {
            let gate = gate.index_axis(Axis(0), 0);
            for mut plane in img.outer_iter_mut() {
                plane *= &gate;
            }
        }
        (
            out,
            CbamCache {
                input: x.clone(),
                refined,
                channel,
                spatial,
            },
        )
    }

    pub fn backward(&mut self, cache: &CbamCache<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad_out.dim();
        let ms = &cache.spatial.gate;

        // Spatial branch.
        let mut d_refined = grad_out.clone();
        let mut d_gate_s = Array4::<T>::zeros((n, 1, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let g = grad_out[[ni, ci, y, xx]];
                        d_refined[[ni, ci, y, xx]] = g * ms[[ni, 0, y, xx]];
                        d_gate_s[[ni, 0, y, xx]] += g * cache.refined[[ni, ci, y, xx]];
                    }
                }
            }
        }
        let d_logit_s = ndarray::Zip::from(&d_gate_s)
            .and(ms)
            .map_collect(|&d, &m| d * m * (T::one() - m));
        let d_pooled = self.spatial.conv.backward(&cache.spatial.conv, &d_logit_s);
        let cc: T = cast(c as f64);
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let da = d_pooled[[ni, 0, y, xx]] / cc;
                    for ci in 0..c {
                        d_refined[[ni, ci, y, xx]] += da;
                    }
                    let cm = cache.spatial.max_idx[[ni, y, xx]];
                    d_refined[[ni, cm, y, xx]] += d_pooled[[ni, 1, y, xx]];
                }
            }
        }

        // Channel branch.
        let mc = &cache.channel.gate;
        let mut dx = d_refined.clone();
        let mut d_gate_c = Array2::<T>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let g = mc[[ni, ci]];
                let mut acc = T::zero();
                for y in 0..h {
                    for xx in 0..w {
                        let d = d_refined[[ni, ci, y, xx]];
                        acc += d * cache.input[[ni, ci, y, xx]];
                        dx[[ni, ci, y, xx]] = d * g;
                    }
                }
                d_gate_c[[ni, ci]] = acc;
            }
        }
        let d_logit_c = ndarray::Zip::from(&d_gate_c)
            .and(mc)
            .map_collect(|&d, &m| d * m * (T::one() - m));
        // logits = z[avg rows] + z[max rows]: both halves receive the same gradient.
        let dz = concatenate(Axis(0), &[d_logit_c.view(), d_logit_c.view()]).unwrap();
        let mut d_hidden = self.channel.fc2.backward(&cache.channel.fc2, &dz);
        ndarray::Zip::from(&mut d_hidden)
            .and(&cache.channel.hidden_pre)
            .for_each(|d, &pre| {
                if pre <= T::zero() {
                    *d = T::zero();
                }
            });
        let d_desc = self.channel.fc1.backward(&cache.channel.fc1, &d_hidden);
        let area: T = cast((h * w) as f64);
        for ni in 0..n {
            for ci in 0..c {
                let da = d_desc[[ni, ci]] / area;
                let mut plane = dx.slice_mut(s![ni, ci, .., ..]);
                plane.mapv_inplace(|v| v + da);
                let i = cache.channel.max_idx[[ni, ci]];
                let (yy, xi) = (i / w, i % w);
                plane[[yy, xi]] += d_desc[[n + ni, ci]];
            }
        }
        dx
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (n, p) in self.channel.fc1.params_mut() {
            out.push((format!("channel.fc1.{n}"), p));
        }
        for (n, p) in self.channel.fc2.params_mut() {
            out.push((format!("channel.fc2.{n}"), p));
        }
        for (n, p) in self.spatial.conv.params_mut() {
            out.push((format!("spatial.conv.{n}"), p));
        }
        out
    }

    pub(crate) fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (n, p) in self.channel.fc1.params() {
            out.push((format!("channel.fc1.{n}"), p));
        }
        for (n, p) in self.channel.fc2.params() {
            out.push((format!("channel.fc2.{n}"), p));
        }
        for (n, p) in self.spatial.conv.params() {
            out.push((format!("spatial.conv.{n}"), p));
        }
        out
    }
}

fn batch_of_one<T: Scalar>(f: &Array3<T>) -> Array4<T> {
    f.clone().insert_axis(Axis(0))
}

/// Per-channel gate weights in (0, 1) for a single `C×H×W` feature map.
pub fn channel_attention<T: Scalar>(f: &Array3<T>, params: &ChannelAttentionParams<T>) -> Result<Array1<T>> {
    let (c, h, w) = f.dim();
    if c != params.channels() {
        return Err(Error::shape(format!(
            "feature map has {c} channels, MLP expects {}",
            params.channels()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("feature map must have H, W >= 1"));
    }
    let block = Cbam {
        channel: params.clone(),
        spatial: SpatialAttentionParams::zeros(1)?,
    };
    let cache = block.channel_forward(&batch_of_one(f));
    Ok(cache.gate.index_axis(Axis(0), 0).to_owned())
}

/// Per-location gate in (0, 1), shape `H×W`.
pub fn spatial_attention<T: Scalar>(f: &Array3<T>, params: &SpatialAttentionParams<T>) -> Result<Array2<T>> {
    let (_, h, w) = f.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("feature map must have H, W >= 1"));
    }
    let block = Cbam {
        channel: ChannelAttentionParams::zeros(1, 1)?,
        spatial: params.clone(),
    };
    let cache = block.spatial_forward(&batch_of_one(f));
    Ok(cache
        .gate
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality::<Ix2>()
        .unwrap())
}

/// Channel gating then spatial gating of a single feature map.
pub fn cbam_forward<T: Scalar>(
    f: &Array3<T>,
    cp: &ChannelAttentionParams<T>,
    sp: &SpatialAttentionParams<T>,
) -> Result<Array3<T>> {
    let block = Cbam {
        channel: cp.clone(),
        spatial: sp.clone(),
    };
    let x = batch_of_one(f);
    block.check_input(x.dim())?;
    let (out, _) = block.forward(&x);
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((c, h, w), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_mlp_gives_half() {
        let cp = ChannelAttentionParams::<f64>::zeros(8, 4).unwrap();
        let g = channel_attention(&random_map(8, 3, 3, 1), &cp).unwrap();
        assert!(g.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_mlp_on_constant_map() {
        // relu(x) - relu(-x) = x: a hidden width of 2C realises the identity.
        let w1 = arr2(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        let w2 = arr2(&[[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]]);
        let cp = ChannelAttentionParams::from_weights(w1, Array1::zeros(4), w2, Array1::zeros(2)).unwrap();
        let mut f = Array3::<f64>::zeros((2, 3, 4));
        f.index_axis_mut(Axis(0), 0).fill(1.0);
        f.index_axis_mut(Axis(0), 1).fill(-1.0);
        let g = channel_attention(&f, &cp).unwrap();
        assert!((g[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((g[1] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let cp = ChannelAttentionParams::<f64>::zeros(8, 4).unwrap();
        assert!(matches!(channel_attention(&random_map(6, 2, 2, 0), &cp), Err(Error::Shape(_))));
        let sp = SpatialAttentionParams::<f64>::zeros(7).unwrap();
        assert!(cbam_forward(&random_map(6, 2, 2, 0), &cp, &sp).is_err());
    }

    #[test]
    fn even_spatial_kernel_rejected() {
        assert!(SpatialAttentionParams::<f64>::zeros(6).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SpatialAttentionParams::<f64>::new(4, &mut rng).is_err());
    }

    #[test]
    fn zero_kernel_spatial_is_half_and_shape_preserving() {
        let sp = SpatialAttentionParams::<f64>::zeros(7).unwrap();
        let m = spatial_attention(&random_map(3, 7, 11, 2), &sp).unwrap();
        assert_eq!(m.dim(), (7, 11));
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn one_by_one_kernel_reads_channel_mean() {
        let sp = SpatialAttentionParams::from_weights(
            Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 0.0]).unwrap(),
            0.0,
        )
        .unwrap();
        let v = 0.7;
        let f = Array3::from_elem((4, 3, 5), v);
        let m = spatial_attention(&f, &sp).unwrap();
        let expect = 1.0 / (1.0 + (-v as f64).exp());
        assert!(m.iter().all(|&x| (x - expect).abs() < 1e-12));
    }

    #[test]
    fn zero_params_quarter_scale() {
        let cp = ChannelAttentionParams::<f64>::zeros(4, 2).unwrap();
        let sp = SpatialAttentionParams::<f64>::zeros(7).unwrap();
        let f = random_map(4, 5, 6, 3);
        let out = cbam_forward(&f, &cp, &sp).unwrap();
        assert_eq!(out, f.mapv(|v| 0.25 * v));
        let z = Array3::<f64>::zeros((4, 5, 6));
        assert_eq!(cbam_forward(&z, &cp, &sp).unwrap(), z);
    }

    #[test]
    fn contraction_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cp = ChannelAttentionParams::<f64>::new(6, 2, &mut rng).unwrap();
        let sp = SpatialAttentionParams::<f64>::new(3, &mut rng).unwrap();
        let f = random_map(6, 4, 9, 4);
        let out = cbam_forward(&f, &cp, &sp).unwrap();
        assert_eq!(out.dim(), f.dim());
        for (o, i) in out.iter().zip(f.iter()) {
            assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = Cbam::<f64>::new(4, 2, 3, &mut rng).unwrap();
        let f = random_map(4, 5, 5, 6);
        let x = f.clone().insert_axis(Axis(0));
        let (sequential, _) = block.forward(&x);
        // spatial first, then channel
        let sc = block.spatial_forward(&x);
        let mut swapped = x.clone();
        for mut plane in swapped.index_axis_mut(Axis(0), 0).outer_iter_mut() {
            plane *= &sc.gate.slice(s![0, 0, .., ..]);
        }
        let cc = block.channel_forward(&swapped);
        for (ci, mut plane) in swapped.index_axis_mut(Axis(0), 0).outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v * cc.gate[[0, ci]]);
        }
        let diff = (&sequential - &swapped).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn hidden_width_floor() {
        let cp = ChannelAttentionParams::<f32>::zeros(8, 16).unwrap();
        assert_eq!(cp.hidden(), 1);
        let cp = ChannelAttentionParams::<f32>::zeros(32, 16).unwrap();
        assert_eq!(cp.hidden(), 2);
    }
}

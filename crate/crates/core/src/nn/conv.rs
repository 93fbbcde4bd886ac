use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{Param, Scalar};
use crate::error::{Error, Result};

/// Stride-1 2-D convolution with "same" zero padding (odd kernels only).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
}

pub struct ConvCache<T> {
    cols: Array2<T>,
    input_dim: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        check_kernel(kernel)?;
        let fan_in = (in_ch * kernel * kernel) as f64;
        Ok(Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
            bias: Param::zeros(&[out_ch]),
            kernel,
        })
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        check_kernel(kernel)?;
        Ok(Self {
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Param::zeros(&[out_ch]),
            kernel,
        })
    }

    pub fn from_weights(weight: Array4<T>, bias: Array1<T>) -> Result<Self> {
        let (o, _, kh, kw) = weight.dim();
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        check_kernel(kh)?;
        if bias.len() != o {
            return Err(Error::shape(format!(
                "bias length {} does not match {o} output channels",
                bias.len()
            )));
        }
        Ok(Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(bias.into_dyn()),
            kernel: kh,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let o = self.out_channels();
        let ckk = self.weight.value.len() / o;
        self.weight
            .value
            .view()
            .into_shape_with_order((o, ckk))
            .expect("contiguous conv weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let cols = im2col(x, self.kernel);
        let out2 = self.weight_matrix().dot(&cols);
        let o = self.out_channels();
        let mut out = out2
            .into_shape_with_order((o, n, h, w))
            .expect("conv output reshape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut img in out.outer_iter_mut() {
            for (mut plane, &b) in img.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + b);
            }
        }
        (
            out,
            ConvCache {
                cols,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, _, h, w) = cache.input_dim;
        let o = self.out_channels();
        let g2 = grad_out
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, n * h * w))
            .expect("conv grad reshape");
        let dw = g2.dot(&cache.cols.t());
        let ckk = dw.len() / o;
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((o, ckk))
                .expect("contiguous conv grad");
            wg += &dw;
        }
        let db = g2.sum_axis(Axis(1));
        self.bias.grad += &db.into_dyn();
        let dcols = self.weight_matrix().t().dot(&g2);
        col2im(&dcols, cache.input_dim, self.kernel)
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Param<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub(crate) fn params(&self) -> [(&'static str, &Param<T>); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::config(format!(
            "kernel size must be odd and positive, got {kernel}"
        )));
    }
    Ok(())
}

/// Valid output column range `[lo, hi)` for a kernel tap offset `off`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &Array4<T>, k: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let hw = h * w;
    let ncols = n * hw;
    let mut cols = Array2::<T>::zeros((c * k * k, ncols));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (oh_lo, oh_hi) = tap_range(h, dy);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (ow_lo, ow_hi) = tap_range(w, dx);
                let row = (ci * k + ki) * k + kj;
                let dst_row = &mut cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut dst_row[ni * hw..(ni + 1) * hw];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh as isize + dy) as usize;
                        let s = &src[ih * w..(ih + 1) * w];
                        let d = &mut dst[oh * w..(oh + 1) * w];
                        for ow in ow_lo..ow_hi {
                            d[ow] = s[(ow as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, dim: (usize, usize, usize, usize), k: usize) -> Array4<T> {
    let (n, c, h, w) = dim;
    let pad = (k / 2) as isize;
    let hw = h * w;
    let ncols = n * hw;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); n * c * hw];
    for ci in 0..c {
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (oh_lo, oh_hi) = tap_range(h, dy);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (ow_lo, ow_hi) = tap_range(w, dx);
                let row = (ci * k + ki) * k + kj;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &src_row[ni * hw..(ni + 1) * hw];
                    let dst = &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh as isize + dy) as usize;
                        for ow in ow_lo..ow_hi {
                            let iw = (ow as isize + dx) as usize;
                            dst[ih * w + iw] += src[oh * w + ow];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).expect("col2im shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Array4<f64>, wt: &Array4<f64>, b: &Array1<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (o, _, k, _) = wt.dim();
        let pad = (k / 2) as isize;
        let mut out = Array4::zeros((n, o, h, w));
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = y as isize + ki as isize - pad;
                                    let ix = xx as isize + kj as isize - pad;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[oi, ci, ki, kj]] * x[[ni, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[ni, oi, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_nested_loops() {
        let x = Array::from_shape_fn((2, 3, 5, 4), |(a, b, c, d)| {
            ((a * 31 + b * 7 + c * 3 + d) as f64 * 0.37).sin()
        });
        let wt = Array::from_shape_fn((4, 3, 3, 3), |(a, b, c, d)| {
            ((a * 13 + b * 5 + c * 2 + d) as f64 * 0.61).cos()
        });
        let b = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let conv = Conv2d::from_weights(wt.clone(), b.clone()).unwrap();
        let (out, _) = conv.forward(&x);
        let expect = naive_conv(&x, &wt, &b);
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_kernel_on_small_map() {
        // 7x7 kernel over a 2x3 map: most taps fall into padding.
        let x = Array::from_shape_fn((1, 2, 2, 3), |(_, b, c, d)| (b + c * 3 + d) as f64);
        let wt = Array::from_shape_fn((1, 2, 7, 7), |(_, b, c, d)| ((b + c + d) as f64 * 0.1).sin());
        let b = Array1::zeros(1);
        let conv = Conv2d::from_weights(wt.clone(), b.clone()).unwrap();
        let (out, _) = conv.forward(&x);
        let expect = naive_conv(&x, &wt, &b);
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Conv2d::<f64>::zeros(2, 1, 4).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Array::from_shape_fn((2, 2, 4, 3), |(a, b, c, d)| {
            ((a * 17 + b * 5 + c * 3 + d) as f64 * 0.43).sin()
        });
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng).unwrap();
        let r = Array::from_shape_fn((2, 3, 4, 3), |(a, b, c, d)| ((a + b * 2 + c * 3 + d) as f64).cos());
        let (_, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &r);
        let loss = |conv: &Conv2d<f64>, x: &Array4<f64>| (conv.forward(x).0 * &r).sum();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        let gw = conv.weight.grad.clone();
        for flat in [0usize, 7, 23, 40] {
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += h;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let a = gw.as_slice().unwrap()[flat];
            assert!((fd - a).abs() < 1e-6, "dw {flat}: {fd} vs {a}");
        }
    }
}

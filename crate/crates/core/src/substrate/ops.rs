//! Forward and backward kernels for the differentiable operations.
//!
//! Convolutions are cross-correlations lowered to GEMM through an im2col buffer. A transposed
//! convolution is the exact adjoint of the convolution that maps its output extents back onto
//! its input extents, so the two share one [`ConvGeometry`].

use crate::error::{contract, Error, Result};

use super::{gemm, RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(H / stride)`; padding split with the smaller half on top/left.
    Same,
    /// No padding; output extent `(H - k) / stride + 1`.
    Valid,
}

/// Geometry of a strided 2-d cross-correlation from a large map onto a small one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d` over an `input` of shape `[C_in,H,W]` with `kernel` `[C_out,C_in,kH,kW]`.
    pub fn conv(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let &[c_in, h, w] = input else {
            return Err(contract!("conv2d input must be [C,H,W], got {:?}", input));
        };
        let &[c_out, k_in, kh, kw] = kernel else {
            return Err(contract!("conv2d kernel must be [C_out,C_in,kH,kW], got {:?}", kernel));
        };
        if stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        if k_in != c_in {
            return Err(contract!(
                "kernel input-channel dimension is {} but input has {} channels",
                k_in,
                c_in
            ));
        }
        let (out_h, pad_top) = axis(h, kh, stride, padding, "height")?;
        let (out_w, pad_left) = axis(w, kw, stride, padding, "width")?;
        Ok(ConvGeometry {
            in_channels: c_in,
            in_h: h,
            in_w: w,
            out_channels: c_out,
            out_h,
            out_w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the convolution whose adjoint is `transposed_conv2d(input, kernel)`.
    ///
    /// `input` is `[C_in,H,W]`, `kernel` is `[C_in,C_out,kH,kW]`; the returned geometry maps
    /// `[C_out, H'', W'']` onto `[C_in, H, W]`.
    pub fn transposed(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let &[c_small, h, w] = input else {
            return Err(contract!("transposed conv input must be [C,H,W], got {:?}", input));
        };
        let &[k_small, c_big, kh, kw] = kernel else {
            return Err(contract!("transposed conv kernel must be [C_in,C_out,kH,kW], got {:?}", kernel));
        };
        if stride == 0 {
            return Err(Error::Config("transposed convolution stride must be at least 1".into()));
        }
        if k_small != c_small {
            return Err(contract!(
                "kernel input-channel dimension is {} but input has {} channels",
                k_small,
                c_small
            ));
        }
        let big = |n: usize, k: usize| match padding {
            Padding::Same => n * stride,
            Padding::Valid => (n - 1) * stride + k,
        };
        let geom = Self::conv(&[c_big, big(h, kh), big(w, kw)], &[c_small, c_big, kh, kw], stride, padding)
            .map_err(|e| Error::Config(format!("transposed convolution is not invertible: {e}")))?;
        if geom.out_h != h || geom.out_w != w {
            return Err(Error::Config(format!(
                "transposed convolution does not invert: {}x{} maps back to {}x{}",
                h, w, geom.out_h, geom.out_w
            )));
        }
        Ok(geom)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_h, self.in_w]
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }
}

fn axis(n: usize, k: usize, stride: usize, padding: Padding, name: &str) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            if k > n + total {
                return Err(contract!("kernel {} {} exceeds padded input {}", name, k, n + total));
            }
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if k > n {
                return Err(contract!("kernel {} {} exceeds input {} {}", name, k, name, n));
            }
            Ok(((n - k) / stride + 1, 0))
        }
    }
}

/// Unfolds receptive fields into `cols` (`patch_len × out_pixels`).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(data: &mut [T], bias: &[T]) {
    let per = data.len() / bias.len();
    for (chunk, &b) in data.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Scalar>(data: &[T], channels: usize) -> Vec<T> {
    let per = data.len() / channels;
    data.chunks(per).map(|c| c.iter().copied().sum()).collect()
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(contract!("bias shape {:?} does not match {} output channels", bias.shape(), channels));
    }
    Ok(())
}

/// 2-d cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kH,kW]` plus per-channel bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::conv(input.shape(), kernel.shape(), stride, padding)?;
    check_bias(bias, g.out_channels)?;
    Ok(conv_forward(input.data(), kernel.data(), bias.data(), &g))
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], k: &[T], bias: &[T], g: &ConvGeometry) -> Tensor<T> {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); pl * p];
    im2col(x, g, &mut cols);
    let mut out = vec![T::zero(); g.out_channels * p];
    gemm(false, false, g.out_channels, pl, p, k, &cols, T::zero(), &mut out);
    add_channel_bias(&mut out, bias);
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); pl * p];
    im2col(x, g, &mut cols);
    let mut dk = vec![T::zero(); g.out_channels * pl];
    gemm(false, true, g.out_channels, p, pl, grad_out, &cols, T::zero(), &mut dk);
    let db = channel_sums(grad_out, g.out_channels);
    let dx = want_input.then(|| {
        gemm(true, false, pl, g.out_channels, p, k, grad_out, T::zero(), &mut cols);
        let mut dx = vec![T::zero(); g.in_channels * g.in_h * g.in_w];
        col2im(&cols, g, &mut dx);
        dx
    });
    (dx, dk, db)
}

/// Transposed convolution: the adjoint of `conv2d` with the same kernel, plus bias.
///
/// `input` is `[C_in,H,W]`, `kernel` is `[C_in,C_out,kH,kW]`. With `Same` padding the output is
/// `[C_out, H·s, W·s]`; with `Valid` it is `[C_out, (H-1)·s+kH, (W-1)·s+kW]`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::transposed(input.shape(), kernel.shape(), stride, padding)?;
    check_bias(bias, g.in_channels)?;
    Ok(convt_forward(input.data(), kernel.data(), bias.data(), &g))
}

pub(crate) fn convt_forward<T: Scalar>(y: &[T], k: &[T], bias: &[T], g: &ConvGeometry) -> Tensor<T> {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); pl * p];
    gemm(true, false, pl, g.out_channels, p, k, y, T::zero(), &mut cols);
    let mut out = vec![T::zero(); g.in_channels * g.in_h * g.in_w];
    col2im(&cols, g, &mut out);
    add_channel_bias(&mut out, bias);
    Tensor::new(&g.in_shape(), out).expect("transposed conv output shape")
}

pub(crate) fn convt_backward<T: Scalar>(
    y: &[T],
    k: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    want_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::zero(); pl * p];
    im2col(grad_out, g, &mut cols);
    let mut dk = vec![T::zero(); g.out_channels * pl];
    gemm(false, true, g.out_channels, p, pl, y, &cols, T::zero(), &mut dk);
    let db = channel_sums(grad_out, g.in_channels);
    let dy = want_input.then(|| {
        let mut dy = vec![T::zero(); g.out_channels * p];
        gemm(false, false, g.out_channels, pl, p, k, &cols, T::zero(), &mut dy);
        dy
    });
    (dy, dk, db)
}

/// Cached statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: T,
    pub group: usize,
}

fn gain_group(x: &[usize], gain: &[usize]) -> Result<usize> {
    if gain.len() > x.len() || x[..gain.len()] != *gain {
        return Err(contract!("layer-norm gain shape {:?} does not broadcast to {:?}", gain, x));
    }
    Ok(x[gain.len()..].iter().product())
}

/// Normalizes all elements of `x` to zero mean and unit variance, then applies
/// `gain` and `bias`, which broadcast along trailing axes (shape must be a prefix of `x`).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, gain, bias, epsilon)?.0)
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if epsilon <= 0.0 {
        return Err(Error::Config("layer-norm epsilon must be positive".into()));
    }
    let group = gain_group(x.shape(), gain.shape())?;
    bias.expect_shape(gain.shape())?;
    let n = T::from_usize(x.len()).unwrap();
    let first = x.data()[0];
    let mean = if x.data().iter().all(|&v| v == first) {
        first
    } else {
        x.data().iter().copied().sum::<T>() / n
    };
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + T::of(epsilon)).sqrt();
    let normalized: Vec<T> = x.data().iter().map(|&v| (v - mean) * inv_std).collect();
    let out = normalized
        .iter()
        .enumerate()
        .map(|(i, &h)| gain.data()[i / group] * h + bias.data()[i / group])
        .collect();
    let y = Tensor::new(x.shape(), out)?;
    Ok((y, LayerNormCache { normalized, inv_std, group }))
}

/// Returns `(d_x, d_gain, d_bias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize(grad_out.len()).unwrap();
    let mut dgain = vec![T::zero(); gain.len()];
    let mut dbias = vec![T::zero(); gain.len()];
    let mut dxhat = Vec::with_capacity(grad_out.len());
    let (mut sum_d, mut sum_dh) = (T::zero(), T::zero());
    for (i, (&dy, &h)) in grad_out.iter().zip(&cache.normalized).enumerate() {
        let c = i / cache.group;
        dgain[c] += dy * h;
        dbias[c] += dy;
        let d = dy * gain[c];
        sum_d += d;
        sum_dh += d * h;
        dxhat.push(d);
    }
    let (mean_d, mean_dh) = (sum_d / n, sum_dh / n);
    let dx = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(&d, &h)| cache.inv_std * (d - mean_d - h * mean_dh))
        .collect();
    (dx, dgain, dbias)
}

/// Inverted-dropout multiplier mask: zero with probability `rate`, `1/(1-rate)` otherwise.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut RngStream) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.uniform() < rate { T::zero() } else { keep }).collect()
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout on a plain tensor.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, rng: &mut RngStream, training: bool) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape(), data)
}

/// Logistic function, kept strictly inside `(0, 1)` at the working precision.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    if s.is_nan() {
        return s;
    }
    let half_ulp = T::epsilon() / T::of(2.0);
    s.max(T::min_positive_value()).min(T::one() - half_ulp)
}

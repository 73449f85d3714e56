//! Training objective and image-quality metrics.
//!
//! `mse_loss` sums squared error over every pixel and channel of a frame and averages over
//! frames. `gradient_difference_loss` compares absolute neighbour differences along both image
//! axes, using only valid interior pairs. `psnr` works on the per-pixel mean squared error with
//! peak value 1.

use crate::error::{contract, Error, Result};
use crate::substrate::{Scalar, Tensor};

/// Default trade-off between the squared-error and gradient-difference terms.
pub const DEFAULT_ETA: f64 = 0.4;

/// PSNR reported when the per-pixel error vanishes.
pub const PSNR_CAP_DB: f64 = 100.0;

const PSNR_MSE_FLOOR: f64 = 1e-10;

fn check_pairs<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>]) -> Result<()> {
    if ys.len() != xs.len() {
        return Err(contract!("{} output frames vs {} target frames", ys.len(), xs.len()));
    }
    if ys.is_empty() {
        return Err(contract!("loss over an empty frame sequence"));
    }
    for (i, (y, x)) in ys.iter().zip(xs).enumerate() {
        if y.shape() != x.shape() {
            return Err(contract!("frame {}: output shape {:?} vs target {:?}", i, y.shape(), x.shape()));
        }
    }
    Ok(())
}

pub fn mse_loss<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>]) -> Result<T> {
    check_pairs(ys, xs)?;
    let total: T = ys
        .iter()
        .zip(xs)
        .map(|(y, x)| y.data().iter().zip(x.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
        .sum();
    Ok(total / T::from_usize(ys.len()).unwrap())
}

/// Gradient of [`mse_loss`] with respect to each output frame.
pub fn mse_loss_grad<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    check_pairs(ys, xs)?;
    let s = T::of(2.0 / ys.len() as f64);
    ys.iter().zip(xs).map(|(y, x)| y.zip_map(x, |a, b| s * (a - b))).collect()
}

fn frame_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = t.dims3()?;
    if h < 2 || w < 2 {
        return Err(contract!("gradient difference loss needs frames of at least 2x2, got {}x{}", h, w));
    }
    Ok((c, h, w))
}

/// Visits every valid neighbour pair `(later, earlier)` of a `[C,H,W]` frame.
fn for_each_pair(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for ch in 0..c {
        let base = ch * h * w;
        for u in 0..h {
            for v in 0..w {
                let here = base + u * w + v;
                if u > 0 {
                    f(here, here - w);
                }
                if v > 0 {
                    f(here, here - 1);
                }
            }
        }
    }
}

pub fn gradient_difference_loss<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>]) -> Result<T> {
    check_pairs(ys, xs)?;
    let mut total = T::zero();
    for (y, x) in ys.iter().zip(xs) {
        let (c, h, w) = frame_dims(y)?;
        let (yd, xd) = (y.data(), x.data());
        for_each_pair(c, h, w, |a, b| {
            let diff = (xd[a] - xd[b]).abs() - (yd[a] - yd[b]).abs();
            total += diff * diff;
        });
    }
    Ok(total / T::from_usize(ys.len()).unwrap())
}

/// Gradient of [`gradient_difference_loss`] with respect to each output frame
/// (the derivative of `|t|` at `t = 0` is taken as 0).
pub fn gradient_difference_loss_grad<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    check_pairs(ys, xs)?;
    let s = T::of(2.0 / ys.len() as f64);
    let mut out = Vec::with_capacity(ys.len());
    for (y, x) in ys.iter().zip(xs) {
        let (c, h, w) = frame_dims(y)?;
        let (yd, xd) = (y.data(), x.data());
        let mut g = Tensor::zeros(y.shape());
        let gd = g.data_mut();
        for_each_pair(c, h, w, |a, b| {
            let dy = yd[a] - yd[b];
            let sign = if dy > T::zero() {
                T::one()
            } else if dy < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            let d = s * (dy.abs() - (xd[a] - xd[b]).abs()) * sign;
            gd[a] += d;
            gd[b] -= d;
        });
        out.push(g);
    }
    Ok(out)
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub gd: f64,
    pub combined: f64,
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("loss weight eta={eta} must lie in [0, 1]")));
    }
    Ok(())
}

/// `(1 - eta) * mse + eta * gd`.
pub fn combine(mse: f64, gd: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok((1.0 - eta) * mse + eta * gd)
}

pub fn combined_loss<T: Scalar>(ys: &[&Tensor<T>], xs: &[&Tensor<T>], eta: f64) -> Result<LossBreakdown> {
    check_eta(eta)?;
    let mse = mse_loss(ys, xs)?.as_f64();
    let gd = gradient_difference_loss(ys, xs)?.as_f64();
    Ok(LossBreakdown { mse, gd, combined: combine(mse, gd, eta)? })
}

/// Peak signal-to-noise ratio in dB for pixels in `[0,1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(y: &Tensor<T>, x: &Tensor<T>) -> Result<f64> {
    if y.shape() != x.shape() {
        return Err(contract!("psnr: shape {:?} vs {:?}", y.shape(), x.shape()));
    }
    let mse = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / y.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        -10.0 * mse.log10()
    }
}

/// Channel-wise pixel mean of the input frames.
pub fn mean_frame_baseline<T: Scalar>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| contract!("mean frame of an empty sequence"))?;
    let mut acc = vec![0.0f64; first.len()];
    for f in frames {
        f.expect_shape(first.shape())?;
        for (a, &v) in acc.iter_mut().zip(f.data()) {
            *a += v.as_f64();
        }
    }
    let n = frames.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| T::of(a / n)).collect())
}

use crate::error::{contract, Result};
use crate::substrate::{Scalar, Tensor};

use super::ModelConfig;

/// A sequence of `n` frames `[C,H,W]` with pixels in `[0,1]`: `X = X_r ‖ X_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTensor {
    pub frames: Vec<Tensor<f32>>,
}

impl EpisodeTensor {
    pub fn new(frames: Vec<Tensor<f32>>) -> Result<Self> {
        let ep = EpisodeTensor { frames };
        ep.check_pixels()?;
        Ok(ep)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// First `k` frames.
    pub fn encoder_part(&self, k: usize) -> &[Tensor<f32>] {
        &self.frames[..k.min(self.frames.len())]
    }

    fn check_pixels(&self) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            if let Some(v) = f.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(contract!("frame {i} has pixel value {v} outside [0,1]"));
            }
        }
        Ok(())
    }

    /// Checks frame count and extents against `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.frames.len() != cfg.seq_len {
            return Err(contract!("episode has {} frames, expected {}", self.frames.len(), cfg.seq_len));
        }
        check_frames(&self.frames, &cfg.frame_shape())?;
        self.check_pixels()
    }

    /// Mirror image along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        EpisodeTensor { frames: self.frames.iter().map(flip_frame).collect() }
    }
}

pub(crate) fn check_frames(frames: &[Tensor<f32>], shape: &[usize; 3]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != shape {
            return Err(contract!("frame {i} has shape {:?}, expected {:?}", f.shape(), shape));
        }
    }
    Ok(())
}

pub(crate) fn cast_frames<T: Scalar>(frames: &[Tensor<f32>]) -> Vec<Tensor<T>> {
    frames.iter().map(|f| f.cast()).collect()
}

fn flip_frame(f: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = f.dims3().expect("frames are rank 3");
    let d = f.data();
    Tensor::from_fn(f.shape(), |i| {
        let (plane, x) = (i / w, i % w);
        debug_assert!(plane / h < f.shape()[0]);
        d[plane * w + (w - 1 - x)]
    })
}

/// The episode's subsymbolic code `V = h_k ‖ c_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f32>,
}

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Self {
        LatentVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_columns() {
        let f = Tensor::new(&[1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let ep = EpisodeTensor::new(vec![f]).unwrap().flip_horizontal();
        assert_eq!(ep.frames[0].data(), &[0.3, 0.2, 0.1, 0.6, 0.5, 0.4]);
    }

    #[test]
    fn pixel_range_is_enforced() {
        let f = Tensor::new(&[1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(EpisodeTensor::new(vec![f]).is_err());
    }
}

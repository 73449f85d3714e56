use crate::error::{Error, Result};

use super::{ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected ADAM step using the gradients stored in `params`.
///
/// Fails without touching anything if any gradient entry is non-finite.
pub fn adam_update<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for e in params.entries() {
        if let Some(index) = e.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: e.name.clone(), index });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.epsilon));
    for ((e, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let it = e.value.data_mut().iter_mut().zip(e.grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 · gamma^(step / period)`.
pub fn exp_decay_lr(step: u64, lr0: f64, gamma: f64, period: u64) -> f64 {
    lr0 * gamma.powf(step as f64 / period.max(1) as f64)
}

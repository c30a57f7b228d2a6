//! Adam and parameter averaging.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments aligned with a [`ParamSet`], plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut m = ParamSet::new();
        for (name, t) in params.iter() {
            m.push(name, Tensor::zeros(t.shape()));
        }
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam step. `grads[i]` matches `params.get(i)`.
pub fn adam_update<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    ensure!(
        grads.len() == params.len() && state.m.len() == params.len(),
        Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len()))
    );
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() / (T::one() - b1.powi(t));
    let c2 = T::one() / (T::one() - b2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, g) in grads.iter().enumerate() {
        let w = params.get_mut(i).data_mut();
        ensure!(g.len() == w.len(), Error::Shape(format!("gradient {i} has {} values, parameter {}", g.len(), w.len())));
        let m = state.m.get_mut(i).data_mut();
        let v = state.v.get_mut(i).data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            w[j] -= lr * (m[j] * c1) / ((v[j] * c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `shadow <- m * shadow + (1 - m) * live`.
pub fn ema_update<T: Scalar>(shadow: &mut ParamSet<T>, live: &ParamSet<T>, m: f64) -> Result<()> {
    shadow.check_layout(live)?;
    let m = T::lit(m);
    for (s, l) in shadow.tensors_mut().zip(live.tensors()) {
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = m * *a + (T::one() - m) * b;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

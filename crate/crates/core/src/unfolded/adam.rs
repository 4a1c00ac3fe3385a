//! Adam with bias correction over [`ParamVector`] groups.

use super::params::{ParamVector, TrainMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamVector<T>,
    second: ParamVector<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(like: &ParamVector<T>, config: AdamConfig) -> Self {
        Self { config, step: 0, first: like.zeros_like(), second: like.zeros_like() }
    }
}

/// One Adam step on the groups enabled by `mask`. Fails before touching any
/// parameter if a gradient entry is non-finite.
pub fn adam_update<T: Scalar>(params: &mut ParamVector<T>, grads: &ParamVector<T>, state: &mut AdamState<T>, lr: f64, mask: &TrainMask) -> Result<()> {
    let enabled = params.group_mask(mask);
    let mut offset = 0;
    for (on, g) in enabled.iter().zip(grads.groups()) {
        if *on {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(offset + i));
            }
        }
        offset += g.len();
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let groups = params.groups_mut().into_iter().zip(grads.groups()).zip(state.first.groups_mut()).zip(state.second.groups_mut());
    for (on, (((p, g), m), v)) in enabled.into_iter().zip(groups) {
        if !on {
            continue;
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

//! AdamW with decoupled weight decay, plus global-norm clipping.

use serde::{Deserialize, Serialize};

use super::array::{Array, Scalar};
use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Array<T>>,
    pub second_moment: Vec<Array<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros = || params.values.iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// One bias-corrected AdamW update. Rejects the whole step, leaving
/// parameters and state untouched, if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Array<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.values.len() {
        return Err(Error::Dimension {
            op: "adamw_step",
            lhs: vec![params.values.len()],
            rhs: vec![grads.len()],
        });
    }
    if lr < 0.0 {
        return Err(Error::Usage(format!("negative learning rate {lr}")));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.values[i].shape() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: params.values[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(params.names[i].clone()));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let decay = T::from_f64(1.0 - lr * c.weight_decay);
    let step_size = T::from_f64(lr / bc1);
    let bc2_sqrt = T::from_f64(bc2.sqrt());
    let eps = T::from_f64(c.eps);

    for (i, g) in grads.iter().enumerate() {
        let p = params.values[i].data_mut();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            if c.weight_decay != 0.0 {
                p[j] = p[j] * decay;
            }
            let denom = v[j].sqrt() / bc2_sqrt + eps;
            p[j] = p[j] - step_size * m[j] / denom;
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

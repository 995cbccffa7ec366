//! Adam with bias correction.

use super::params::{Grads, ModelParams};
use crate::tensor::{check_shape, NnError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One update of every parameter that has a gradient. Increments `t` once.
pub fn adam_step<F: Scalar>(params: &mut ModelParams<F>, grads: &Grads<F>, cfg: &AdamConfig) -> Result<(), NnError> {
    for (name, g) in &grads.tensors {
        check_shape("adam_step", params.get(name)?.shape(), g.shape())?;
    }
    params.t += 1;
    let t = params.t as i32;
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 - cfg.beta1.powi(t));
    let c2 = F::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    for (name, g) in &grads.tensors {
        let w = params.tensors.get_mut(name).expect("checked above");
        let m = params.m.entry(name.clone()).or_insert_with(|| crate::tensor::Tensor::zeros(g.shape()));
        let v = params.v.entry(name.clone()).or_insert_with(|| crate::tensor::Tensor::zeros(g.shape()));
        for (((wi, mi), vi), &gi) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *wi = *wi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

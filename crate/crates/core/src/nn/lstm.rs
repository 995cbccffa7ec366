//! Single LSTM cell with gate packing `[i, f, g, o]`.

use super::ops::{affine, affine_backward, sigmoid, sigmoid_grad, tanh_grad};
use crate::tensor::{check_len, check_shape, NnError, Scalar, Tensor};

/// Borrowed weights: `w: [4H, E + H]` acting on `[x; h_prev]`, `b: [4H]`.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a, F> {
    pub w: &'a Tensor<F>,
    pub b: &'a Tensor<F>,
}

impl<F: Scalar> LstmWeights<'_, F> {
    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1] - self.hidden()
    }
}

/// Everything the backward pass needs from one step.
#[derive(Debug, Clone)]
pub struct LstmCache<F> {
    pub xh: Vec<F>,
    pub c_prev: Vec<F>,
    /// Post-activation gates, packed `[i, f, g, o]`.
    pub gates: Vec<F>,
    pub c: Vec<F>,
    pub tanh_c: Vec<F>,
}

pub fn lstm_cell<F: Scalar>(
    x: &[F],
    h_prev: &[F],
    c_prev: &[F],
    p: LstmWeights<'_, F>,
) -> Result<(Vec<F>, Vec<F>, LstmCache<F>), NnError> {
    let hd = p.hidden();
    check_shape("lstm_cell", &[4 * hd, x.len() + hd], p.w.shape())?;
    check_len("lstm_cell", hd, h_prev.len())?;
    check_len("lstm_cell", hd, c_prev.len())?;
    let mut xh = Vec::with_capacity(x.len() + hd);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);
    let mut gates = vec![F::zero(); 4 * hd];
    affine(p.w.data(), Some(p.b.data()), &xh, &mut gates);
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(*z) };
    }
    let mut c = vec![F::zero(); hd];
    let mut tanh_c = vec![F::zero(); hd];
    let mut h = vec![F::zero(); hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    let cache = LstmCache { xh, c_prev: c_prev.to_vec(), gates, c: c.clone(), tanh_c };
    Ok((h, c, cache))
}

/// Gradient of one step. `dh`/`dc` are the total upstream gradients on this
/// step's outputs. Weight gradients accumulate into `dw`/`db`; returns
/// `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward<F: Scalar>(
    cache: &LstmCache<F>,
    p: LstmWeights<'_, F>,
    dh: &[F],
    dc: &[F],
    dw: &mut [F],
    db: &mut [F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = p.hidden();
    let g = &cache.gates;
    let mut dz = vec![F::zero(); 4 * hd];
    let mut dc_prev = vec![F::zero(); hd];
    for j in 0..hd {
        let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
        let dc_total = dc[j] + dh[j] * o * tanh_grad(cache.tanh_c[j]);
        dz[j] = dc_total * gg * sigmoid_grad(i);
        dz[hd + j] = dc_total * cache.c_prev[j] * sigmoid_grad(f);
        dz[2 * hd + j] = dc_total * i * tanh_grad(gg);
        dz[3 * hd + j] = dh[j] * cache.tanh_c[j] * sigmoid_grad(o);
        dc_prev[j] = dc_total * f;
    }
    let mut dxh = vec![F::zero(); cache.xh.len()];
    affine_backward(p.w.data(), &cache.xh, &dz, dw, Some(db), Some(&mut dxh));
    let dh_prev = dxh.split_off(cache.xh.len() - hd);
    (dxh, dh_prev, dc_prev)
}

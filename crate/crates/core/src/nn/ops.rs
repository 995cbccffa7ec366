//! Activations, affine maps, losses and dropout. Every forward has a
//! matching backward that accumulates into caller-owned gradient buffers.

use crate::rng::SplitMix64;
use crate::tensor::{check_len, check_shape, NnError, Scalar, Tensor};

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + xa[k] * xb[k];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn relu<F: Scalar>(x: F) -> F {
    x.max(F::zero())
}

/// Derivatives expressed through the forward output.
pub fn sigmoid_grad<F: Scalar>(y: F) -> F {
    y * (F::one() - y)
}

pub fn tanh_grad<F: Scalar>(y: F) -> F {
    F::one() - y * y
}

pub fn relu_grad<F: Scalar>(y: F) -> F {
    if y > F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

/// Softmax with max-subtraction.
pub fn softmax<F: Scalar>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v = *v / sum);
    out
}

pub fn log_softmax<F: Scalar>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `dx_i = y_i (dy_i - <y, dy>)`.
pub fn softmax_backward<F: Scalar>(y: &[F], dy: &[F]) -> Vec<F> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &di)| yi * (di - inner)).collect()
}

/// `W x + b` for `W: [M, N]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let (m, n) = matrix_dims("linear", w)?;
    check_len("linear", n, x.len())?;
    check_shape("linear", &[m], b.shape())?;
    let mut y = vec![F::zero(); m];
    affine(w.data(), Some(b.data()), x.data(), &mut y);
    Ok(Tensor::vector(y))
}

pub struct LinearGrads<F> {
    pub dx: Tensor<F>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn linear_backward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, dy: &Tensor<F>) -> Result<LinearGrads<F>, NnError> {
    let (m, n) = matrix_dims("linear", w)?;
    check_len("linear", n, x.len())?;
    check_len("linear", m, dy.len())?;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[m]);
    let mut dx = vec![F::zero(); n];
    affine_backward(w.data(), x.data(), dy.data(), dw.data_mut(), Some(db.data_mut()), Some(&mut dx));
    Ok(LinearGrads { dx: Tensor::vector(dx), dw, db })
}

pub(crate) fn matrix_dims<F: Scalar>(op: &'static str, w: &Tensor<F>) -> Result<(usize, usize), NnError> {
    match *w.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(NnError::ShapeMismatch { op, expected: vec![0, 0], got: w.shape().to_vec() }),
    }
}

/// `y = W x (+ b)` where `W` is row-major with `y.len()` rows.
#[inline]
pub fn affine<F: Scalar>(w: &[F], b: Option<&[F]>, x: &[F], y: &mut [F]) {
    let n = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let base = b.map_or(F::zero(), |b| b[i]);
        *yi = base + dot(&w[i * n..(i + 1) * n], x);
    }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and `dx += Wᵀ dy`.
#[inline]
pub fn affine_backward<F: Scalar>(
    w: &[F],
    x: &[F],
    dy: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    dx: Option<&mut [F]>,
) {
    let n = x.len();
    for (i, &g) in dy.iter().enumerate() {
        if g == F::zero() {
            continue;
        }
        axpy(g, x, &mut dw[i * n..(i + 1) * n]);
    }
    if let Some(db) = db {
        for (b, &g) in db.iter_mut().zip(dy) {
            *b = *b + g;
        }
    }
    if let Some(dx) = dx {
        for (i, &g) in dy.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            axpy(g, &w[i * n..(i + 1) * n], dx);
        }
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax(logits) - onehot(target)`.
pub fn cross_entropy<F: Scalar>(logits: &[F], target: usize) -> Result<(F, Vec<F>), NnError> {
    if target >= logits.len() {
        return Err(NnError::BadTarget { target, classes: logits.len() });
    }
    let logp = log_softmax(logits);
    let mut grad: Vec<F> = logp.iter().map(|&l| l.exp()).collect();
    grad[target] = grad[target] - F::one();
    Ok((-logp[target], grad))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1 / (1 - rate)`), which is also the backward mask.
pub fn dropout<F: Scalar>(x: &[F], rate: f64, rng: &mut SplitMix64, training: bool) -> (Vec<F>, Vec<F>) {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if !training || rate == 0.0 {
        return (x.to_vec(), vec![F::one(); x.len()]);
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let mask: Vec<F> = x
        .iter()
        .map(|_| if rng.next_f64() < rate { F::zero() } else { keep })
        .collect();
    (x.iter().zip(&mask).map(|(&a, &m)| a * m).collect(), mask)
}

/// Channel-wise maximum over the rows of `nu: [L, D]`, with the winning row
/// per channel (ties resolve to the lowest row).
pub fn region_pool<F: Scalar>(nu: &Tensor<F>) -> Result<(Tensor<F>, Vec<usize>), NnError> {
    let (l, d) = matrix_dims("region_pool", nu)?;
    if l == 0 {
        return Err(NnError::EmptyInput("region_pool"));
    }
    let mut best = nu.row(0).to_vec();
    let mut arg = vec![0; d];
    for i in 1..l {
        for (c, &v) in nu.row(i).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = i;
            }
        }
    }
    Ok((Tensor::vector(best), arg))
}

/// Routes each channel's gradient to its winning row, accumulating into `dnu`.
pub fn region_pool_backward<F: Scalar>(argmax: &[usize], dvp: &[F], dnu: &mut Tensor<F>) {
    let d = argmax.len();
    for (c, (&i, &g)) in argmax.iter().zip(dvp).enumerate() {
        let slot = &mut dnu.data_mut()[i * d + c];
        *slot = *slot + g;
    }
}

//! Soft attention over region features.
//!
//! For regions `nu: [L, D]` and a guide vector `h`:
//!
//! ```text
//! e_i   = tanh(Wv nu_i + Wh h + b)     (A-dim)
//! s_i   = ws . e_i
//! alpha = softmax(s)
//! vhat  = sum_i alpha_i nu_i
//! ```
//!
//! `Wv nu_i` does not depend on `h`, so it is projected once per image with
//! [`project_regions`] and shared across every decoding step.

use super::ops::{affine, affine_backward, axpy, dot, matrix_dims, softmax, softmax_backward, tanh_grad};
use crate::tensor::{check_len, check_shape, NnError, Scalar, Tensor};

#[derive(Clone, Copy)]
pub struct AttentionWeights<'a, F> {
    /// `[A, D]`
    pub wv: &'a Tensor<F>,
    /// `[A, H]`
    pub wh: &'a Tensor<F>,
    /// `[A]`
    pub b: &'a Tensor<F>,
    /// `[A]`
    pub ws: &'a Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    pub h: Vec<F>,
    /// `[L, A]` post-tanh hidden units.
    pub e: Vec<F>,
    pub alpha: Vec<F>,
}

/// Gradients for the guide-dependent weights; `wv` goes through
/// [`project_regions_backward`].
pub struct AttentionGrads<'a, F> {
    pub wh: &'a mut [F],
    pub b: &'a mut [F],
    pub ws: &'a mut [F],
}

/// `proj[i] = Wv nu_i`, shape `[L, A]`.
pub fn project_regions<F: Scalar>(nu: &Tensor<F>, wv: &Tensor<F>) -> Result<Tensor<F>, NnError> {
    let (l, d) = matrix_dims("attention", nu)?;
    let (a, dv) = matrix_dims("attention", wv)?;
    check_len("attention", d, dv)?;
    let mut out = vec![F::zero(); l * a];
    for i in 0..l {
        affine(wv.data(), None, nu.row(i), &mut out[i * a..(i + 1) * a]);
    }
    Tensor::from_vec(&[l, a], out)
}

/// Accumulates `dWv += dprojᵀ nu` and `dnu += dproj Wv`.
pub fn project_regions_backward<F: Scalar>(
    nu: &Tensor<F>,
    wv: &Tensor<F>,
    dproj: &Tensor<F>,
    dwv: &mut [F],
    dnu: &mut Tensor<F>,
) {
    let (l, d) = (nu.shape()[0], nu.shape()[1]);
    for i in 0..l {
        affine_backward(wv.data(), nu.row(i), dproj.row(i), dwv, None, Some(&mut dnu.data_mut()[i * d..(i + 1) * d]));
    }
}

/// One attention read given pre-projected regions.
pub fn attend<F: Scalar>(
    nu: &Tensor<F>,
    proj: &Tensor<F>,
    h: &[F],
    w: AttentionWeights<'_, F>,
) -> Result<(Vec<F>, Vec<F>, AttentionCache<F>), NnError> {
    let (l, d) = matrix_dims("attention", nu)?;
    let (a, hd) = matrix_dims("attention", w.wh)?;
    check_len("attention", hd, h.len())?;
    check_shape("attention", &[l, a], proj.shape())?;
    check_len("attention", a, w.b.len())?;
    check_len("attention", a, w.ws.len())?;
    if l == 0 {
        return Err(NnError::EmptyInput("attention"));
    }
    let mut guide = vec![F::zero(); a];
    affine(w.wh.data(), Some(w.b.data()), h, &mut guide);
    let mut e = vec![F::zero(); l * a];
    let mut scores = vec![F::zero(); l];
    for i in 0..l {
        let row = &mut e[i * a..(i + 1) * a];
        for ((ek, &pk), &gk) in row.iter_mut().zip(proj.row(i)).zip(&guide) {
            *ek = (pk + gk).tanh();
        }
        scores[i] = dot(row, w.ws.data());
    }
    let alpha = softmax(&scores);
    let mut vhat = vec![F::zero(); d];
    for (i, &ai) in alpha.iter().enumerate() {
        axpy(ai, nu.row(i), &mut vhat);
    }
    Ok((alpha.clone(), vhat, AttentionCache { h: h.to_vec(), e, alpha }))
}

/// Backward of [`attend`]. Accumulates into `dproj`, `dnu` and `grads`;
/// returns the gradient on the guide vector.
pub fn attend_backward<F: Scalar>(
    nu: &Tensor<F>,
    cache: &AttentionCache<F>,
    w: AttentionWeights<'_, F>,
    dvhat: &[F],
    dproj: &mut Tensor<F>,
    dnu: &mut Tensor<F>,
    grads: AttentionGrads<'_, F>,
) -> Vec<F> {
    let (l, d) = (nu.shape()[0], nu.shape()[1]);
    let a = w.ws.len();
    let dalpha: Vec<F> = (0..l).map(|i| dot(nu.row(i), dvhat)).collect();
    for (i, &ai) in cache.alpha.iter().enumerate() {
        axpy(ai, dvhat, &mut dnu.data_mut()[i * d..(i + 1) * d]);
    }
    let ds = softmax_backward(&cache.alpha, &dalpha);
    let mut dguide = vec![F::zero(); a];
    for i in 0..l {
        let e = &cache.e[i * a..(i + 1) * a];
        axpy(ds[i], e, grads.ws);
        let du = &mut dproj.data_mut()[i * a..(i + 1) * a];
        for k in 0..a {
            let g = ds[i] * w.ws.data()[k] * tanh_grad(e[k]);
            du[k] = du[k] + g;
            dguide[k] = dguide[k] + g;
        }
    }
    let mut dh = vec![F::zero(); cache.h.len()];
    affine_backward(w.wh.data(), &cache.h, &dguide, grads.wh, Some(grads.b), Some(&mut dh));
    dh
}

/// Projects and attends in one call; returns `(alpha, vhat)`.
pub fn attention<F: Scalar>(nu: &Tensor<F>, h: &[F], w: AttentionWeights<'_, F>) -> Result<(Vec<F>, Vec<F>), NnError> {
    let proj = project_regions(nu, w.wv)?;
    let (alpha, vhat, _) = attend(nu, &proj, h, w)?;
    Ok((alpha, vhat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_scores_are_uniform() {
        let mut rng = SplitMix64::new(4);
        let nu = random(&[5, 3], &mut rng);
        let (wv, wh, b) = (random(&[4, 3], &mut rng), random(&[4, 2], &mut rng), random(&[4], &mut rng));
        let ws = Tensor::zeros(&[4]);
        let (alpha, vhat) = attention(&nu, &[0.3, -0.1], AttentionWeights { wv: &wv, wh: &wh, b: &b, ws: &ws }).unwrap();
        assert!(alpha.iter().all(|&a| (a - 0.2).abs() < 1e-15));
        for c in 0..3 {
            let mean = (0..5).map(|i| nu.row(i)[c]).sum::<f64>() / 5.0;
            assert!((vhat[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_passes_through() {
        let mut rng = SplitMix64::new(8);
        let nu = random(&[1, 6], &mut rng);
        let (wv, wh, b, ws) = (random(&[3, 6], &mut rng), random(&[3, 2], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng));
        let (alpha, vhat) = attention(&nu, &[1.0, 2.0], AttentionWeights { wv: &wv, wh: &wh, b: &b, ws: &ws }).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(vhat, nu.data());
    }

    #[test]
    fn output_is_in_hull() {
        let mut rng = SplitMix64::new(15);
        let nu = random(&[7, 4], &mut rng);
        let (wv, wh, b, ws) = (random(&[5, 4], &mut rng), random(&[5, 3], &mut rng), random(&[5], &mut rng), random(&[5], &mut rng));
        let (alpha, vhat) = attention(&nu, &[0.2, 0.9, -0.4], AttentionWeights { wv: &wv, wh: &wh, b: &b, ws: &ws }).unwrap();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..4 {
            let col: Vec<f64> = (0..7).map(|i| nu.row(i)[c]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(vhat[c] >= lo && vhat[c] <= hi);
        }
    }
}

//! 2-D convolution (cross-correlation) and max pooling over `[C, H, W]` maps.

use super::ops::{axpy, dot};
use crate::tensor::{check_shape, NnError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom { kernel: 3, stride: 1, pad: 1 }
    }
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` for which `o * stride + k - pad` lands in `[0, n)`.
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if n + self.pad > k { (n - 1 + self.pad - k) / self.stride + 1 } else { 0 };
        (lo, hi.min(out))
    }
}

fn dims3<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<[usize; 3], NnError> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(NnError::ShapeMismatch { op, expected: vec![0, 0, 0], got: t.shape().to_vec() }),
    }
}

fn conv_dims<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    g: ConvGeom,
) -> Result<([usize; 3], usize, usize, usize), NnError> {
    let [ci, h, w] = dims3("conv2d", input)?;
    let co = weight.shape().first().copied().unwrap_or(0);
    check_shape("conv2d", &[co, ci, g.kernel, g.kernel], weight.shape())?;
    check_shape("conv2d", &[co], bias.shape())?;
    if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel || g.stride == 0 {
        return Err(NnError::ShapeMismatch { op: "conv2d", expected: vec![g.kernel, g.kernel], got: vec![h, w] });
    }
    Ok(([ci, h, w], co, g.out_len(h), g.out_len(w)))
}

/// Zero-padded cross-correlation. `weight: [C_out, C_in, k, k]`.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    g: ConvGeom,
) -> Result<Tensor<F>, NnError> {
    let ([ci_n, h, w], co_n, ho, wo) = conv_dims(input, weight, bias, g)?;
    let k = g.kernel;
    let mut out = vec![F::zero(); co_n * ho * wo];
    let (x, wt) = (input.data(), weight.data());
    for co in 0..co_n {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..ci_n {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid(ky, h, ho);
                for kx in 0..k {
                    let wv = wt[((co * ci_n + ci) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = g.valid(kx, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = &mut plane[oy * wo + ox_lo..oy * wo + ox_hi];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            axpy(wv, &src[iy * w + ix0..iy * w + ix0 + dst.len()], dst);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                let ix = (ox_lo + j) * g.stride + kx - g.pad;
                                *d = *d + wv * src[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[co_n, ho, wo], out)
}

/// Accumulates weight and bias gradients into `dw`/`db` and, when
/// `want_input` is set, returns the gradient with respect to the input.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    g: ConvGeom,
    dout: &Tensor<F>,
    dw: &mut Tensor<F>,
    db: &mut Tensor<F>,
    want_input: bool,
) -> Result<Option<Tensor<F>>, NnError> {
    let ([ci_n, h, w], co_n, ho, wo) = conv_dims(input, weight, db, g)?;
    check_shape("conv2d_backward", &[co_n, ho, wo], dout.shape())?;
    check_shape("conv2d_backward", weight.shape(), dw.shape())?;
    let k = g.kernel;
    let (x, wt, dy) = (input.data(), weight.data(), dout.data());
    let mut dx = if want_input { vec![F::zero(); ci_n * h * w] } else { Vec::new() };
    let dwd = dw.data_mut();
    for co in 0..co_n {
        let gplane = &dy[co * ho * wo..(co + 1) * ho * wo];
        db.data_mut()[co] = db.data()[co] + gplane.iter().copied().sum();
        for ci in 0..ci_n {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = g.valid(ky, h, ho);
                for kx in 0..k {
                    let widx = ((co * ci_n + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox_lo, ox_hi) = g.valid(kx, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = F::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let s = iy * w + ix0;
                            acc = acc + dot(grow, &src[s..s + grow.len()]);
                            if want_input {
                                let dst = &mut dx[ci * h * w + s..ci * h * w + s + grow.len()];
                                axpy(wv, grow, dst);
                            }
                        } else {
                            for (j, &gv) in grow.iter().enumerate() {
                                let ix = (ox_lo + j) * g.stride + kx - g.pad;
                                acc = acc + gv * src[iy * w + ix];
                                if want_input {
                                    let d = &mut dx[ci * h * w + iy * w + ix];
                                    *d = *d + wv * gv;
                                }
                            }
                        }
                    }
                    dwd[widx] = dwd[widx] + acc;
                }
            }
        }
    }
    Ok(want_input.then(|| Tensor::from_vec(&[ci_n, h, w], dx).expect("sizes agree")))
}

/// Non-overlapping max pooling with `window == stride`. Returns the pooled
/// map and, per output, the flat input index that won (ties go to the
/// lowest index).
pub fn maxpool2d<F: Scalar>(input: &Tensor<F>, window: usize) -> Result<(Tensor<F>, Vec<usize>), NnError> {
    let [c, h, w] = dims3("maxpool2d", input)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(NnError::ShapeMismatch { op: "maxpool2d", expected: vec![window, window], got: vec![h, w] });
    }
    let (ho, wo) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = ch * h * w + oy * window * w + ox * window;
                let mut best = x[best_i];
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * window + dy) * w + ox * window + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<F: Scalar>(input_shape: &[usize], argmax: &[usize], dout: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        d[i] = d[i] + g;
    }
    dx
}

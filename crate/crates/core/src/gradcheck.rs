//! Central finite-difference checks for every backward pass, run in `f64`.
//!
//! Each layer check reduces the layer output to a scalar with a fixed random
//! projection, so the analytic side is the backward pass seeded with that
//! projection and the numeric side only ever calls the forward pass.

use std::fmt;

use crate::dsl;
use crate::model::{Model, ModelConfig};
use crate::nn::attention::{project_regions_backward, AttentionGrads};
use crate::nn::ops::{relu, relu_grad, sigmoid, sigmoid_grad, softmax, softmax_backward, tanh_grad};
use crate::nn::{
    attend, attend_backward, conv2d, conv2d_backward, cross_entropy, init_params, linear, linear_backward, lstm_cell,
    lstm_cell_backward, maxpool2d, maxpool2d_backward, project_regions, region_pool, region_pool_backward, AttentionWeights,
    ConvGeom, LstmWeights, ModelParams,
};
use crate::render;
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::image_tensor;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Coordinates left out because the perturbation crossed a relu or
    /// pooling tie.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped
        )
    }
}

fn uniform(rng: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) * scale).collect()
}

fn tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, uniform(rng, shape.iter().product(), scale)).expect("sizes agree")
}

fn project(r: &[f64], y: &[f64]) -> f64 {
    r.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Compares `grads` with central differences of `loss` over every
/// coordinate of every input.
fn check_inputs(
    name: &'static str,
    inputs: &[Vec<f64>],
    loss: impl Fn(&[Vec<f64>]) -> f64,
    grads: &[Vec<f64>],
) -> CheckResult {
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            work[k][j] = input[j] + STEP;
            let up = loss(&work);
            work[k][j] = input[j] - STEP;
            let down = loss(&work);
            work[k][j] = input[j];
            worst = worst.max(rel_error(grads[k][j], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    CheckResult { name, max_rel_error: worst, tolerance: LAYER_TOLERANCE, checked, skipped: 0 }
}

pub fn check_conv2d(rng: &mut SplitMix64) -> CheckResult {
    let g = ConvGeom::default();
    let (x, w, b) = (tensor(rng, &[2, 5, 5], 1.0), tensor(rng, &[3, 2, 3, 3], 0.5), tensor(rng, &[3], 0.1));
    let r = uniform(rng, 3 * 5 * 5, 1.0);
    let loss = |v: &[Vec<f64>]| {
        let x = Tensor::from_vec(&[2, 5, 5], v[0].clone()).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], v[1].clone()).unwrap();
        let b = Tensor::vector(v[2].clone());
        project(&r, conv2d(&x, &w, &b, g).unwrap().data())
    };
    let dout = Tensor::from_vec(&[3, 5, 5], r.clone()).unwrap();
    let (mut dw, mut db) = (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()));
    let dx = conv2d_backward(&x, &w, g, &dout, &mut dw, &mut db, true).unwrap().unwrap();
    let inputs = [x.into_data(), w.into_data(), b.into_data()];
    check_inputs("conv2d", &inputs, loss, &[dx.into_data(), dw.into_data(), db.into_data()])
}

pub fn check_maxpool(rng: &mut SplitMix64) -> CheckResult {
    let x = tensor(rng, &[2, 4, 6], 1.0);
    let r = uniform(rng, 2 * 2 * 3, 1.0);
    let loss = |v: &[Vec<f64>]| {
        let x = Tensor::from_vec(&[2, 4, 6], v[0].clone()).unwrap();
        project(&r, maxpool2d(&x, 2).unwrap().0.data())
    };
    let (_, arg) = maxpool2d(&x, 2).unwrap();
    let dx = maxpool2d_backward(x.shape(), &arg, &Tensor::from_vec(&[2, 2, 3], r.clone()).unwrap());
    check_inputs("maxpool", &[x.into_data()], loss, &[dx.into_data()])
}

pub fn check_linear(rng: &mut SplitMix64) -> CheckResult {
    let (x, w, b) = (tensor(rng, &[5], 1.0), tensor(rng, &[4, 5], 0.5), tensor(rng, &[4], 0.1));
    let r = uniform(rng, 4, 1.0);
    let loss = |v: &[Vec<f64>]| {
        let w = Tensor::from_vec(&[4, 5], v[1].clone()).unwrap();
        project(&r, linear(&Tensor::vector(v[0].clone()), &w, &Tensor::vector(v[2].clone())).unwrap().data())
    };
    let g = linear_backward(&x, &w, &Tensor::vector(r.clone())).unwrap();
    check_inputs("linear", &[x.into_data(), w.into_data(), b.into_data()], loss, &[g.dx.into_data(), g.dw.into_data(), g.db.into_data()])
}

pub fn check_activations(rng: &mut SplitMix64) -> CheckResult {
    // Keep relu inputs away from its kink.
    let x: Vec<f64> = uniform(rng, 6, 1.0).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    let r = uniform(rng, 24, 1.0);
    let forward = |x: &[f64]| -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        y.extend(x.iter().map(|v| v.tanh()));
        y.extend(x.iter().map(|&v| relu(v)));
        y.extend(softmax(x));
        y
    };
    let y = forward(&x);
    let n = x.len();
    let sm = softmax_backward(&y[3 * n..], &r[3 * n..]);
    let dx: Vec<f64> = (0..n)
        .map(|i| {
            r[i] * sigmoid_grad(y[i]) + r[n + i] * tanh_grad(y[n + i]) + r[2 * n + i] * relu_grad(y[2 * n + i]) + sm[i]
        })
        .collect();
    check_inputs("activations", &[x], |v| project(&r, &forward(&v[0])), &[dx])
}

pub fn check_lstm(rng: &mut SplitMix64) -> CheckResult {
    let (e, h, steps) = (3, 4, 3);
    let w = tensor(rng, &[4 * h, e + h], 0.5);
    let b = tensor(rng, &[4 * h], 0.2);
    let xs = uniform(rng, steps * e, 1.0);
    let (h0, c0) = (uniform(rng, h, 0.5), uniform(rng, h, 0.5));
    let rh = uniform(rng, steps * h, 1.0);
    let rc = uniform(rng, h, 1.0);
    let loss = |v: &[Vec<f64>]| {
        let w = Tensor::from_vec(&[4 * h, e + h], v[0].clone()).unwrap();
        let b = Tensor::vector(v[1].clone());
        let p = LstmWeights { w: &w, b: &b };
        let (mut hs, mut cs) = (v[3].clone(), v[4].clone());
        let mut total = 0.0;
        for t in 0..steps {
            let (hn, cn, _) = lstm_cell(&v[2][t * e..(t + 1) * e], &hs, &cs, p).unwrap();
            total += project(&rh[t * h..(t + 1) * h], &hn);
            (hs, cs) = (hn, cn);
        }
        total + project(&rc, &cs)
    };
    let p = LstmWeights { w: &w, b: &b };
    let mut caches = Vec::new();
    let (mut hs, mut cs) = (h0.clone(), c0.clone());
    for t in 0..steps {
        let (hn, cn, cache) = lstm_cell(&xs[t * e..(t + 1) * e], &hs, &cs, p).unwrap();
        caches.push(cache);
        (hs, cs) = (hn, cn);
    }
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; b.len()]);
    let mut dxs = vec![0.0; steps * e];
    let (mut dh, mut dc) = (vec![0.0; h], rc.clone());
    for t in (0..steps).rev() {
        let dh_total: Vec<f64> = dh.iter().zip(&rh[t * h..(t + 1) * h]).map(|(a, b)| a + b).collect();
        let (dx, dhp, dcp) = lstm_cell_backward(&caches[t], p, &dh_total, &dc, &mut dw, &mut db);
        dxs[t * e..(t + 1) * e].copy_from_slice(&dx);
        (dh, dc) = (dhp, dcp);
    }
    let inputs = [w.into_data(), b.into_data(), xs, h0, c0];
    check_inputs("lstm_cell", &inputs, loss, &[dw, db, dxs, dh, dc])
}

pub fn check_attention(rng: &mut SplitMix64) -> CheckResult {
    let (l, d, a, h) = (5, 3, 4, 4);
    let nu = tensor(rng, &[l, d], 1.0);
    let hv = uniform(rng, h, 1.0);
    let (wv, wh) = (tensor(rng, &[a, d], 0.8), tensor(rng, &[a, h], 0.8));
    let (b, ws) = (tensor(rng, &[a], 0.3), tensor(rng, &[a], 1.0));
    let r = uniform(rng, d, 1.0);
    let loss = |v: &[Vec<f64>]| {
        let nu = Tensor::from_vec(&[l, d], v[0].clone()).unwrap();
        let wv = Tensor::from_vec(&[a, d], v[2].clone()).unwrap();
        let wh = Tensor::from_vec(&[a, h], v[3].clone()).unwrap();
        let (b, ws) = (Tensor::vector(v[4].clone()), Tensor::vector(v[5].clone()));
        let w = AttentionWeights { wv: &wv, wh: &wh, b: &b, ws: &ws };
        let proj = project_regions(&nu, &wv).unwrap();
        project(&r, &attend(&nu, &proj, &v[1], w).unwrap().1)
    };
    let w = AttentionWeights { wv: &wv, wh: &wh, b: &b, ws: &ws };
    let proj = project_regions(&nu, &wv).unwrap();
    let (_, _, cache) = attend(&nu, &proj, &hv, w).unwrap();
    let mut dproj = Tensor::zeros(proj.shape());
    let mut dnu = Tensor::zeros(nu.shape());
    let (mut dwv, mut dwh, mut db, mut dws) = (vec![0.0; a * d], vec![0.0; a * h], vec![0.0; a], vec![0.0; a]);
    let dh = attend_backward(&nu, &cache, w, &r, &mut dproj, &mut dnu, AttentionGrads { wh: &mut dwh, b: &mut db, ws: &mut dws });
    project_regions_backward(&nu, &wv, &dproj, &mut dwv, &mut dnu);
    let inputs = [nu.data().to_vec(), hv, wv.data().to_vec(), wh.data().to_vec(), b.data().to_vec(), ws.data().to_vec()];
    check_inputs("attention", &inputs, loss, &[dnu.into_data(), dh, dwv, dwh, db, dws])
}

pub fn check_region_pool(rng: &mut SplitMix64) -> CheckResult {
    let nu = tensor(rng, &[6, 4], 1.0);
    let r = uniform(rng, 4, 1.0);
    let loss = |v: &[Vec<f64>]| project(&r, region_pool(&Tensor::from_vec(&[6, 4], v[0].clone()).unwrap()).unwrap().0.data());
    let (_, arg) = region_pool(&nu).unwrap();
    let mut dnu = Tensor::zeros(nu.shape());
    region_pool_backward(&arg, &r, &mut dnu);
    check_inputs("region_pool", &[nu.into_data()], loss, &[dnu.into_data()])
}

pub fn check_cross_entropy(rng: &mut SplitMix64) -> CheckResult {
    let logits = uniform(rng, 7, 2.0);
    let (_, grad) = cross_entropy(&logits, 3).unwrap();
    check_inputs("cross_entropy", &[logits], |v| cross_entropy(&v[0], 3).unwrap().0, &[grad])
}

/// The micro model on one rendered example: every parameter, with dropout
/// on and a fixed mask stream.
pub fn check_model(seed: u64) -> CheckResult {
    let cfg = ModelConfig::micro();
    let mut rng = SplitMix64::new(derive_seed(seed, &[2]));
    let mut params: ModelParams<f64> = init_params(&cfg.param_specs(), seed);
    // Nonzero biases keep relu inputs off their kink on flat image regions.
    for spec in cfg.param_specs().iter().filter(|s| s.shape.len() == 1) {
        for v in params.get_mut(&spec.name).unwrap().data_mut() {
            *v += (rng.next_f64() * 2.0 - 1.0) * 0.1;
        }
    }
    let gt = dsl::tokenize("stack { row { btn img } row { text } }").unwrap();
    let ast = dsl::parse(&gt).unwrap();
    let mut image: Tensor<f64> = image_tensor(&render::render(&ast, 32, 32).unwrap());
    for v in image.data_mut() {
        *v += rng.next_f64() * 0.05;
    }
    let dropout_seed = derive_seed(seed, &[3]);

    let run = |p: &ModelParams<f64>| {
        let model = Model::new(&cfg, p).unwrap();
        model.forward(&image, &gt, &mut SplitMix64::new(dropout_seed), true).unwrap()
    };
    let base = run(&params);
    let pattern = base.activation_pattern();
    let grads = Model::new(&cfg, &params).unwrap().backward(&base);

    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in &names {
        let analytic = grads.get(name).unwrap().data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params.get(name).unwrap().data()[j];
            params.get_mut(name).unwrap().data_mut()[j] = orig + STEP;
            let up = run(&params);
            params.get_mut(name).unwrap().data_mut()[j] = orig - STEP;
            let down = run(&params);
            params.get_mut(name).unwrap().data_mut()[j] = orig;
            if up.activation_pattern() != pattern || down.activation_pattern() != pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up.loss() - down.loss()) / (2.0 * STEP);
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    CheckResult { name: "model", max_rel_error: worst, tolerance: MODEL_TOLERANCE, checked, skipped }
}

/// Every layer check followed by the end-to-end model check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = SplitMix64::new(seed);
    let mut out = vec![
        check_conv2d(&mut rng),
        check_maxpool(&mut rng),
        check_linear(&mut rng),
        check_activations(&mut rng),
        check_lstm(&mut rng),
        check_attention(&mut rng),
        check_region_pool(&mut rng),
        check_cross_entropy(&mut rng),
    ];
    out.push(check_model(seed));
    out
}

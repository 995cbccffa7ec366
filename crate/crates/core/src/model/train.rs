//! Minibatch training with Adam. Each step is a pure function of the
//! parameters (including the step counter), the data and the seed, so a
//! resumed run reproduces an uninterrupted one exactly.

use std::path::Path;

use super::config::ModelConfig;
use super::network::{forward_train, ModelError};
use crate::dsl::TokenId;
use crate::nn::{adam_step, AdamConfig, Grads, ModelParams};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{self, Manifest, Split, SynthError};
use crate::tensor::{NnError, Tensor};

const PERMUTATION_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;

/// One screenshot and its flat program tokens.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: u64,
    pub image: Tensor<f32>,
    pub tokens: Vec<TokenId>,
}

/// Loads every example of `split` from a dataset directory.
pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Vec<Example>, SynthError> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let (image, tokens) = synth::load_example(dir.join(&e.image), dir.join(&e.code))?;
            Ok(Example { id: e.id, image, tokens: tokens.into_ids() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { adam: AdamConfig::default(), batch_size: 8, epochs: 20, max_steps: None, seed: 0, clip_norm: 5.0 }
    }
}

/// What happened in one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub epoch: u64,
    /// Mean loss over the batch before the update.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub epoch_end: bool,
}

pub struct Trainer<'a> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    data: &'a [Example],
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelConfig, cfg: TrainConfig, data: &'a [Example]) -> Result<Self, ModelError> {
        model.validate().map_err(ModelError::Config)?;
        if data.is_empty() {
            return Err(NnError::EmptyInput("training set").into());
        }
        if cfg.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        let s = model.image_size;
        for ex in data {
            crate::tensor::check_shape("training image", &[3, s, s], ex.image.shape())?;
        }
        Ok(Trainer { model, cfg, data })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    /// Example indices of the batch taken at global step `step` (0-based).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        SplitMix64::new(derive_seed(self.cfg.seed, &[PERMUTATION_STREAM, epoch])).shuffle(&mut order);
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    /// Mean loss and summed-then-averaged gradients for a batch. Per-example
    /// work may run in parallel; the reduction order is fixed.
    pub fn batch_gradients(&self, params: &ModelParams<f32>, step: u64, batch: &[usize]) -> Result<(f64, Grads<f32>), ModelError> {
        let one = |(pos, &i): (usize, &usize)| {
            let ex = &self.data[i];
            let mut rng = SplitMix64::new(derive_seed(self.cfg.seed, &[DROPOUT_STREAM, step, pos as u64]));
            forward_train(&self.model, params, &ex.image, &ex.tokens, &mut rng)
        };
        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            batch.par_iter().enumerate().map(one).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = batch.iter().enumerate().map(one).collect();

        let mut loss = 0.0;
        let mut total = params.zero_grads();
        for r in results {
            let (l, g) = r?;
            loss += l as f64;
            total.accumulate(&g)?;
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n as f32);
        Ok((loss / n, total))
    }

    /// Takes the step at `params.t` and advances it by one.
    pub fn step(&self, params: &mut ModelParams<f32>) -> Result<StepLog, ModelError> {
        let step = params.t;
        let batch = self.batch_indices(step);
        let (loss, mut grads) = self.batch_gradients(params, step, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(NnError::NonFinite("training step").into());
        }
        let grad_norm = grads.clip_global_norm(self.cfg.clip_norm);
        adam_step(params, &grads, &self.cfg.adam)?;
        let spe = self.steps_per_epoch();
        Ok(StepLog { step: step + 1, epoch: step / spe, loss, grad_norm, epoch_end: (step + 1).is_multiple_of(spe) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::tokenize;
    use crate::nn::init_params;

    fn toy_data(n: usize) -> Vec<Example> {
        let progs = ["stack { row { btn } }", "stack { row { img label } row { text } }", "stack { row { check } row { slider switch } }"];
        (0..n)
            .map(|i| {
                let mut rng = SplitMix64::new(i as u64);
                let image = Tensor::from_vec(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.next_f64() as f32).collect()).unwrap();
                Example { id: i as u64, image, tokens: tokenize(progs[i % 3]).unwrap().into_ids() }
            })
            .collect()
    }

    fn setup() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig { hidden: 16, embed: 16, conv_widths: [4, 8, 8], attn: 8, ..ModelConfig::micro() };
        let cfg = TrainConfig { batch_size: 2, epochs: 3, seed: 7, ..Default::default() };
        (model, cfg)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let data = toy_data(5);
        let (model, cfg) = setup();
        let trainer = Trainer::new(model, cfg, &data).unwrap();
        assert_eq!(trainer.steps_per_epoch(), 3);
        assert_eq!(trainer.total_steps(), 9);
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|p| trainer.batch_indices(epoch * 3 + p)).collect();
            assert_eq!(trainer.batch_indices(epoch * 3 + 2).len(), 1);
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = toy_data(4);
        let (model, cfg) = setup();
        let trainer = Trainer::new(model, cfg, &data).unwrap();
        let init: ModelParams<f32> = init_params(&model.param_specs(), 1);

        let mut straight = init.clone();
        for _ in 0..4 {
            trainer.step(&mut straight).unwrap();
        }
        let mut resumed = init;
        for _ in 0..2 {
            trainer.step(&mut resumed).unwrap();
        }
        let mut resumed = ModelParams::from_bytes(&resumed.to_bytes()).unwrap();
        for _ in 0..2 {
            trainer.step(&mut resumed).unwrap();
        }
        assert_eq!(straight.to_bytes(), resumed.to_bytes());
    }

    #[test]
    fn loss_goes_down() {
        let data = toy_data(3);
        let (model, mut cfg) = setup();
        cfg.adam.lr = 0.01;
        cfg.batch_size = 3;
        let model = ModelConfig { dropout: 0.0, ..model };
        let trainer = Trainer::new(model, cfg, &data).unwrap();
        let mut params: ModelParams<f32> = init_params(&model.param_specs(), 3);
        let first = trainer.step(&mut params).unwrap().loss;
        let mut last = first;
        for _ in 0..60 {
            last = trainer.step(&mut params).unwrap().loss;
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }

    #[test]
    fn rejects_wrong_image_size() {
        let data = toy_data(1);
        let (model, cfg) = setup();
        assert!(Trainer::new(ModelConfig { image_size: 64, ..model }, cfg, &data).is_err());
        assert!(Trainer::new(model, cfg, &[]).is_err());
    }
}

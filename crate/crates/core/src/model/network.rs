//! Encoder, block decoder, attention and token decoder with a taped
//! forward pass and the matching backward pass.

use thiserror::Error;

use super::config::{names, ModelConfig};
use crate::dsl::{self, DslError, TokenId, BLOCK_END};
use crate::nn::attention::{project_regions_backward, AttentionGrads};
use crate::nn::ops::{affine, affine_backward, cross_entropy, dropout, log_softmax, relu_grad, sigmoid, sigmoid_grad, softmax};
use crate::nn::{
    attend, attend_backward, conv2d, conv2d_backward, lstm_cell, lstm_cell_backward, maxpool2d, maxpool2d_backward,
    project_regions, region_pool, region_pool_backward, AttentionCache, AttentionWeights, ConvGeom, Grads, LstmCache,
    LstmWeights, ModelParams,
};
use crate::rng::SplitMix64;
use crate::tensor::{check_shape, NnError, Scalar, Tensor};

/// Index of the CONTINUE class in the stop distribution.
pub const CONTINUE: usize = 0;
/// Index of the STOP class in the stop distribution.
pub const STOP: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("ground truth is not a program: {0}")]
    NotAProgram(#[from] DslError),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy)]
struct Affine<'a, F> {
    w: &'a Tensor<F>,
    b: &'a Tensor<F>,
}

impl<F: Scalar> Affine<'_, F> {
    fn apply(&self, x: &[F]) -> Vec<F> {
        let mut y = vec![F::zero(); self.b.len()];
        affine(self.w.data(), Some(self.b.data()), x, &mut y);
        y
    }
}

#[derive(Clone)]
struct AffineGrad<F> {
    w: Tensor<F>,
    b: Tensor<F>,
}

impl<F: Scalar> AffineGrad<F> {
    fn like(a: Affine<'_, F>) -> Self {
        AffineGrad { w: Tensor::zeros(a.w.shape()), b: Tensor::zeros(a.b.shape()) }
    }

    fn lstm(a: LstmWeights<'_, F>) -> Self {
        AffineGrad { w: Tensor::zeros(a.w.shape()), b: Tensor::zeros(a.b.shape()) }
    }

    /// Backprop through `y = W x + b`, adding `Wᵀ dy` into `dx` when given.
    fn backward(&mut self, a: Affine<'_, F>, x: &[F], dy: &[F], dx: Option<&mut [F]>) {
        affine_backward(a.w.data(), x, dy, self.w.data_mut(), Some(self.b.data_mut()), dx);
    }

    fn store(self, (w, b): (&str, &str), out: &mut Grads<F>) {
        out.tensors.insert(w.to_string(), self.w);
        out.tensors.insert(b.to_string(), self.b);
    }
}

/// Region features of one image.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F> {
    /// `[L, D]`, one row per spatial cell in row-major order.
    pub nu: Tensor<F>,
    /// Channel-wise maximum of `nu`.
    pub pooled: Vec<F>,
    /// Side lengths `(rows, cols)` of the feature grid.
    pub grid: (usize, usize),
}

/// Output of one block-decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
    /// Sigmoid output that feeds the next step.
    pub o: Vec<F>,
    /// `[P(CONTINUE), P(STOP)]`.
    pub p: Vec<F>,
    pub stop_logits: Vec<F>,
}

impl<F: Scalar> BlockState<F> {
    pub fn wants_stop(&self) -> bool {
        self.p[STOP] > self.p[CONTINUE]
    }
}

/// Input of a block step: the pooled image for the first step, the
/// previous state afterwards.
#[derive(Clone, Copy)]
pub enum BlockInput<'a, F> {
    Pooled(&'a [F]),
    Previous(&'a BlockState<F>),
}

/// Hidden and cell states of both token-LSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState<F> {
    pub h1: Vec<F>,
    pub c1: Vec<F>,
    pub h2: Vec<F>,
    pub c2: Vec<F>,
}

impl<F: Scalar> TokenState<F> {
    pub fn zeros(hidden: usize) -> Self {
        let z = vec![F::zero(); hidden];
        TokenState { h1: z.clone(), c1: z.clone(), h2: z.clone(), c2: z }
    }
}

/// What the token decoder reads at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenInput {
    /// First step: the attended visual features.
    Visual,
    /// Later steps: the previous token.
    Token(TokenId),
}

struct EncoderStage<F> {
    input: Tensor<F>,
    activated: Tensor<F>,
    pool_arg: Vec<usize>,
}

struct BlockCache<F> {
    src: Vec<F>,
    lstm: LstmCache<F>,
    h: Vec<F>,
    o: Vec<F>,
    dstop: Vec<F>,
}

struct TokenCache<F> {
    input: TokenInput,
    l1: LstmCache<F>,
    l2: LstmCache<F>,
    mask: Vec<F>,
    dropped: Vec<F>,
    dlogits: Vec<F>,
}

/// Everything recorded by [`Model::forward`] for the backward pass.
pub struct Tape<F> {
    image_shape: Vec<usize>,
    stages: Vec<EncoderStage<F>>,
    nu: Tensor<F>,
    proj: Tensor<F>,
    pooled: Vec<F>,
    pool_arg: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    attn: Vec<AttentionCache<F>>,
    vhat: Vec<Vec<F>>,
    tokens: Vec<Vec<TokenCache<F>>>,
    pub block_loss: F,
    pub token_loss: F,
}

impl<F: Scalar> Tape<F> {
    pub fn loss(&self) -> F {
        self.block_loss + self.token_loss
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    pub fn alphas(&self) -> impl Iterator<Item = &[F]> {
        self.attn.iter().map(|a| a.alpha.as_slice())
    }

    /// Relu on/off states and every pooling winner. Finite differences are
    /// only meaningful while this stays fixed.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend(s.activated.data().iter().map(|&v| usize::from(v > F::zero())));
            out.extend_from_slice(&s.pool_arg);
        }
        out.extend_from_slice(&self.pool_arg);
        out
    }
}

/// Borrowed view of the parameters, resolved once by name.
pub struct Model<'a, F> {
    pub cfg: ModelConfig,
    conv: [Affine<'a, F>; 3],
    block_in_v: Affine<'a, F>,
    block_in_o: Affine<'a, F>,
    block_lstm: LstmWeights<'a, F>,
    block_out: Affine<'a, F>,
    block_stop: Affine<'a, F>,
    attn: AttentionWeights<'a, F>,
    tok_in_v: Affine<'a, F>,
    tok_embed: Affine<'a, F>,
    tok_lstm1: LstmWeights<'a, F>,
    tok_lstm2: LstmWeights<'a, F>,
    tok_out: Affine<'a, F>,
}

const GEOM: ConvGeom = ConvGeom { kernel: 3, stride: 1, pad: 1 };

impl<'a, F: Scalar> Model<'a, F> {
    pub fn new(cfg: &ModelConfig, params: &'a ModelParams<F>) -> Result<Self, ModelError> {
        cfg.validate().map_err(ModelError::Config)?;
        params.check_specs(&cfg.param_specs())?;
        let aff = |(w, b): (&str, &str)| -> Result<Affine<'a, F>, NnError> { Ok(Affine { w: params.get(w)?, b: params.get(b)? }) };
        let lstm = |(w, b): (&str, &str)| -> Result<LstmWeights<'a, F>, NnError> { Ok(LstmWeights { w: params.get(w)?, b: params.get(b)? }) };
        Ok(Model {
            cfg: *cfg,
            conv: [aff(names::ENC_CONV[0])?, aff(names::ENC_CONV[1])?, aff(names::ENC_CONV[2])?],
            block_in_v: aff(names::BLOCK_IN_V)?,
            block_in_o: aff(names::BLOCK_IN_O)?,
            block_lstm: lstm(names::BLOCK_LSTM)?,
            block_out: aff(names::BLOCK_OUT)?,
            block_stop: aff(names::BLOCK_STOP)?,
            attn: AttentionWeights {
                wv: params.get(names::ATTN_WV)?,
                wh: params.get(names::ATTN_WH)?,
                b: params.get(names::ATTN_B)?,
                ws: params.get(names::ATTN_WS)?,
            },
            tok_in_v: aff(names::TOK_IN_V)?,
            tok_embed: aff(names::TOK_EMBED)?,
            tok_lstm1: lstm(names::TOK_LSTM1)?,
            tok_lstm2: lstm(names::TOK_LSTM2)?,
            tok_out: aff(names::TOK_OUT)?,
        })
    }

    fn encode_taped(&self, image: &Tensor<F>) -> Result<(Vec<EncoderStage<F>>, Tensor<F>, (usize, usize)), ModelError> {
        let s = self.cfg.image_size;
        check_shape("encode", &[3, s, s], image.shape())?;
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(3);
        for layer in &self.conv {
            let mut act = conv2d(&x, layer.w, layer.b, GEOM)?;
            act.data_mut().iter_mut().for_each(|v| *v = v.max(F::zero()));
            let (pooled, pool_arg) = maxpool2d(&act, 2)?;
            stages.push(EncoderStage { input: std::mem::replace(&mut x, pooled), activated: act, pool_arg });
        }
        let (d, gh, gw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let l = gh * gw;
        let fmap = x.data();
        let mut nu = vec![F::zero(); l * d];
        for c in 0..d {
            for i in 0..l {
                nu[i * d + c] = fmap[c * l + i];
            }
        }
        Ok((stages, Tensor::from_vec(&[l, d], nu)?, (gh, gw)))
    }

    /// Conv stack to region features, then channel-wise max pooling.
    pub fn encode(&self, image: &Tensor<F>) -> Result<EncoderOutput<F>, ModelError> {
        let (_, nu, grid) = self.encode_taped(image)?;
        let (pooled, _) = region_pool(&nu)?;
        Ok(EncoderOutput { nu, pooled: pooled.into_data(), grid })
    }

    fn block_step_taped(&self, input: BlockInput<'_, F>) -> Result<(BlockState<F>, LstmCache<F>, Vec<F>), ModelError> {
        let h0 = vec![F::zero(); self.cfg.hidden];
        let (x, src, h_prev, c_prev) = match input {
            BlockInput::Pooled(vp) => (self.block_in_v.apply(vp), vp.to_vec(), &h0, &h0),
            BlockInput::Previous(s) => (self.block_in_o.apply(&s.o), s.o.clone(), &s.h, &s.c),
        };
        let (h, c, cache) = lstm_cell(&x, h_prev, c_prev, self.block_lstm)?;
        let o: Vec<F> = self.block_out.apply(&h).into_iter().map(sigmoid).collect();
        let stop_logits = self.block_stop.apply(&h);
        let p = softmax(&stop_logits);
        Ok((BlockState { h, c, o, p, stop_logits }, cache, src))
    }

    /// One block-decoder step. The first step starts from zero state.
    pub fn block_step(&self, input: BlockInput<'_, F>) -> Result<BlockState<F>, ModelError> {
        Ok(self.block_step_taped(input)?.0)
    }

    /// Projects regions for attention; shared by every block of an image.
    pub fn project(&self, nu: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        Ok(project_regions(nu, self.attn.wv)?)
    }

    /// Attention weights and attended features for one block.
    pub fn attend(&self, nu: &Tensor<F>, proj: &Tensor<F>, h_block: &[F]) -> Result<(Vec<F>, Vec<F>), ModelError> {
        let (alpha, vhat, _) = attend(nu, proj, h_block, self.attn)?;
        Ok((alpha, vhat))
    }

    fn token_input(&self, input: TokenInput, vhat: &[F]) -> Vec<F> {
        match input {
            TokenInput::Visual => self.tok_in_v.apply(vhat),
            TokenInput::Token(id) => {
                let k = self.cfg.vocab;
                (0..self.cfg.embed)
                    .map(|e| self.tok_embed.w.data()[e * k + id] + self.tok_embed.b.data()[e])
                    .collect()
            }
        }
    }

    /// One token-decoder step without dropout: returns logits and the next state.
    pub fn token_step(&self, input: TokenInput, vhat: &[F], state: &TokenState<F>) -> Result<(Vec<F>, TokenState<F>), ModelError> {
        let x = self.token_input(input, vhat);
        let (h1, c1, _) = lstm_cell(&x, &state.h1, &state.c1, self.tok_lstm1)?;
        let (h2, c2, _) = lstm_cell(&h1, &state.h2, &state.c2, self.tok_lstm2)?;
        let logits = self.tok_out.apply(&h2);
        Ok((logits, TokenState { h1, c1, h2, c2 }))
    }

    /// Teacher-forced decoding of one block: one logit row per target token.
    pub fn token_logits(&self, vhat: &[F], targets: &[TokenId]) -> Result<Vec<Vec<F>>, ModelError> {
        let mut state = TokenState::zeros(self.cfg.hidden);
        let mut input = TokenInput::Visual;
        let mut rows = Vec::with_capacity(targets.len());
        for &y in targets {
            let (logits, next) = self.token_step(input, vhat, &state)?;
            rows.push(logits);
            state = next;
            input = TokenInput::Token(y);
        }
        Ok(rows)
    }

    /// Greedy decoding of one block. Returns the tokens and whether the
    /// block hit `max_tokens` without emitting `BLOCK-END`.
    pub fn token_greedy(&self, vhat: &[F]) -> Result<(Vec<TokenId>, F, bool), ModelError> {
        let mut state = TokenState::zeros(self.cfg.hidden);
        let mut input = TokenInput::Visual;
        let mut out = Vec::new();
        let mut score = 0.0f64;
        for _ in 0..self.cfg.max_tokens {
            let (logits, next) = self.token_step(input, vhat, &state)?;
            let logp = log_softmax(&logits);
            let tok = argmax(&logp);
            score += logp[tok].as_f64();
            out.push(tok);
            if tok == BLOCK_END {
                return Ok((out, F::of(score), false));
            }
            state = next;
            input = TokenInput::Token(tok);
        }
        Ok((out, F::of(score), true))
    }

    /// Teacher-forced forward pass over one example with the summed
    /// block and token cross-entropy.
    pub fn forward(&self, image: &Tensor<F>, gt: &[TokenId], rng: &mut SplitMix64, training: bool) -> Result<Tape<F>, ModelError> {
        let blocks = dsl::blockify(gt)?;
        let (stages, nu, _) = self.encode_taped(image)?;
        let (pooled, pool_arg) = region_pool(&nu)?;
        let pooled = pooled.into_data();
        let proj = self.project(&nu)?;
        let s = blocks.len();

        let mut block_caches = Vec::with_capacity(s);
        let mut block_loss = F::zero();
        let mut prev: Option<BlockState<F>> = None;
        for i in 0..s {
            let input = match &prev {
                None => BlockInput::Pooled(&pooled),
                Some(st) => BlockInput::Previous(st),
            };
            let (state, lstm, src) = self.block_step_taped(input)?;
            let target = if i + 1 == s { STOP } else { CONTINUE };
            let (loss, dstop) = cross_entropy(&state.stop_logits, target)?;
            block_loss = block_loss + loss;
            block_caches.push(BlockCache { src, lstm, h: state.h.clone(), o: state.o.clone(), dstop });
            prev = Some(state);
        }

        let mut attn = Vec::with_capacity(s);
        let mut vhats = Vec::with_capacity(s);
        let mut token_caches = Vec::with_capacity(s);
        let mut token_loss = F::zero();
        for (bc, block) in block_caches.iter().zip(blocks.iter()) {
            let (_, vhat, cache) = attend(&nu, &proj, &bc.h, self.attn)?;
            let mut state = TokenState::zeros(self.cfg.hidden);
            let mut input = TokenInput::Visual;
            let mut steps = Vec::with_capacity(block.len());
            for &y in block {
                let x = self.token_input(input, &vhat);
                let (h1, c1, l1) = lstm_cell(&x, &state.h1, &state.c1, self.tok_lstm1)?;
                let (h2, c2, l2) = lstm_cell(&h1, &state.h2, &state.c2, self.tok_lstm2)?;
                let (dropped, mask) = dropout(&h2, self.cfg.dropout, rng, training);
                let logits = self.tok_out.apply(&dropped);
                let (loss, dlogits) = cross_entropy(&logits, y)?;
                token_loss = token_loss + loss;
                steps.push(TokenCache { input, l1, l2, mask, dropped, dlogits });
                state = TokenState { h1, c1, h2, c2 };
                input = TokenInput::Token(y);
            }
            attn.push(cache);
            vhats.push(vhat);
            token_caches.push(steps);
        }

        Ok(Tape {
            image_shape: image.shape().to_vec(),
            stages,
            nu,
            proj,
            pooled,
            pool_arg,
            blocks: block_caches,
            attn,
            vhat: vhats,
            tokens: token_caches,
            block_loss,
            token_loss,
        })
    }

    /// Gradient of `tape.loss()` with respect to every parameter.
    pub fn backward(&self, tape: &Tape<F>) -> Grads<F> {
        let hd = self.cfg.hidden;
        let mut g_tok_in_v = AffineGrad::like(self.tok_in_v);
        let mut g_tok_embed = AffineGrad::like(self.tok_embed);
        let mut g_tok_l1 = AffineGrad::lstm(self.tok_lstm1);
        let mut g_tok_l2 = AffineGrad::lstm(self.tok_lstm2);
        let mut g_tok_out = AffineGrad::like(self.tok_out);
        let mut g_attn_wv = Tensor::zeros(self.attn.wv.shape());
        let mut g_attn_wh = Tensor::zeros(self.attn.wh.shape());
        let mut g_attn_b = Tensor::zeros(self.attn.b.shape());
        let mut g_attn_ws = Tensor::zeros(self.attn.ws.shape());
        let mut g_block_in_v = AffineGrad::like(self.block_in_v);
        let mut g_block_in_o = AffineGrad::like(self.block_in_o);
        let mut g_block_lstm = AffineGrad::lstm(self.block_lstm);
        let mut g_block_out = AffineGrad::like(self.block_out);
        let mut g_block_stop = AffineGrad::like(self.block_stop);
        let mut dnu = Tensor::zeros(tape.nu.shape());
        let mut dproj = Tensor::zeros(tape.proj.shape());

        // Token decoders, then attention, block by block.
        let mut dh_attn = Vec::with_capacity(tape.blocks.len());
        for ((steps, vhat), acache) in tape.tokens.iter().zip(&tape.vhat).zip(&tape.attn) {
            let mut dvhat = vec![F::zero(); vhat.len()];
            let (mut dh1, mut dc1) = (vec![F::zero(); hd], vec![F::zero(); hd]);
            let (mut dh2, mut dc2) = (vec![F::zero(); hd], vec![F::zero(); hd]);
            for st in steps.iter().rev() {
                let mut ddrop = vec![F::zero(); hd];
                g_tok_out.backward(self.tok_out, &st.dropped, &st.dlogits, Some(&mut ddrop));
                for j in 0..hd {
                    dh2[j] = dh2[j] + ddrop[j] * st.mask[j];
                }
                let (dx2, dh2_prev, dc2_prev) =
                    lstm_cell_backward(&st.l2, self.tok_lstm2, &dh2, &dc2, g_tok_l2.w.data_mut(), g_tok_l2.b.data_mut());
                for j in 0..hd {
                    dh1[j] = dh1[j] + dx2[j];
                }
                let (dx1, dh1_prev, dc1_prev) =
                    lstm_cell_backward(&st.l1, self.tok_lstm1, &dh1, &dc1, g_tok_l1.w.data_mut(), g_tok_l1.b.data_mut());
                match st.input {
                    TokenInput::Visual => g_tok_in_v.backward(self.tok_in_v, vhat, &dx1, Some(&mut dvhat)),
                    TokenInput::Token(id) => {
                        let k = self.cfg.vocab;
                        let (gw, gb) = (g_tok_embed.w.data_mut(), g_tok_embed.b.data_mut());
                        for (e, &d) in dx1.iter().enumerate() {
                            gw[e * k + id] = gw[e * k + id] + d;
                            gb[e] = gb[e] + d;
                        }
                    }
                }
                (dh1, dc1, dh2, dc2) = (dh1_prev, dc1_prev, dh2_prev, dc2_prev);
            }
            let grads = AttentionGrads { wh: g_attn_wh.data_mut(), b: g_attn_b.data_mut(), ws: g_attn_ws.data_mut() };
            dh_attn.push(attend_backward(&tape.nu, acache, self.attn, &dvhat, &mut dproj, &mut dnu, grads));
        }

        // Block decoder, latest step first.
        let mut dpooled = vec![F::zero(); tape.pooled.len()];
        let mut dx_next: Option<Vec<F>> = None;
        let (mut dh_next, mut dc_next) = (vec![F::zero(); hd], vec![F::zero(); hd]);
        for (t, bc) in tape.blocks.iter().enumerate().rev() {
            let mut dh: Vec<F> = dh_attn[t].iter().zip(&dh_next).map(|(&a, &b)| a + b).collect();
            g_block_stop.backward(self.block_stop, &bc.h, &bc.dstop, Some(&mut dh));
            if let Some(dx) = dx_next.take() {
                let mut d_o = vec![F::zero(); hd];
                g_block_in_o.backward(self.block_in_o, &bc.o, &dx, Some(&mut d_o));
                let dpre: Vec<F> = d_o.iter().zip(&bc.o).map(|(&g, &o)| g * sigmoid_grad(o)).collect();
                g_block_out.backward(self.block_out, &bc.h, &dpre, Some(&mut dh));
            }
            let (dx, dh_prev, dc_prev) =
                lstm_cell_backward(&bc.lstm, self.block_lstm, &dh, &dc_next, g_block_lstm.w.data_mut(), g_block_lstm.b.data_mut());
            if t == 0 {
                g_block_in_v.backward(self.block_in_v, &bc.src, &dx, Some(&mut dpooled));
            } else {
                dx_next = Some(dx);
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }

        region_pool_backward(&tape.pool_arg, &dpooled, &mut dnu);
        project_regions_backward(&tape.nu, self.attn.wv, &dproj, g_attn_wv.data_mut(), &mut dnu);

        // Region rows back to the channel-major feature map.
        let (l, d) = (tape.nu.shape()[0], tape.nu.shape()[1]);
        let last = &tape.stages[2];
        let pooled_shape = [d, last.activated.shape()[1] / 2, last.activated.shape()[2] / 2];
        let mut dmap = vec![F::zero(); l * d];
        for i in 0..l {
            for c in 0..d {
                dmap[c * l + i] = dnu.data()[i * d + c];
            }
        }
        let mut dmap = Tensor::from_vec(&pooled_shape, dmap).expect("sizes agree");

        let mut conv_grads: Vec<AffineGrad<F>> = self.conv.iter().map(|&a| AffineGrad::like(a)).collect();
        for (k, stage) in tape.stages.iter().enumerate().rev() {
            let mut dact = maxpool2d_backward(stage.activated.shape(), &stage.pool_arg, &dmap);
            for (g, &a) in dact.data_mut().iter_mut().zip(stage.activated.data()) {
                *g = *g * relu_grad(a);
            }
            let g = &mut conv_grads[k];
            let dinput = conv2d_backward(&stage.input, self.conv[k].w, GEOM, &dact, &mut g.w, &mut g.b, k > 0)
                .expect("shapes validated in forward");
            if let Some(dx) = dinput {
                dmap = dx;
            }
        }
        debug_assert_eq!(tape.image_shape.len(), 3);

        let mut out = Grads::default();
        for (g, &n) in conv_grads.into_iter().zip(&names::ENC_CONV) {
            g.store(n, &mut out);
        }
        g_block_in_v.store(names::BLOCK_IN_V, &mut out);
        g_block_in_o.store(names::BLOCK_IN_O, &mut out);
        g_block_lstm.store(names::BLOCK_LSTM, &mut out);
        g_block_out.store(names::BLOCK_OUT, &mut out);
        g_block_stop.store(names::BLOCK_STOP, &mut out);
        out.tensors.insert(names::ATTN_WV.into(), g_attn_wv);
        out.tensors.insert(names::ATTN_WH.into(), g_attn_wh);
        out.tensors.insert(names::ATTN_B.into(), g_attn_b);
        out.tensors.insert(names::ATTN_WS.into(), g_attn_ws);
        g_tok_in_v.store(names::TOK_IN_V, &mut out);
        g_tok_embed.store(names::TOK_EMBED, &mut out);
        g_tok_l1.store(names::TOK_LSTM1, &mut out);
        g_tok_l2.store(names::TOK_LSTM2, &mut out);
        g_tok_out.store(names::TOK_OUT, &mut out);
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradients for one example.
pub fn forward_train<F: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<F>,
    image: &Tensor<F>,
    gt: &[TokenId],
    rng: &mut SplitMix64,
) -> Result<(F, Grads<F>), ModelError> {
    let model = Model::new(cfg, params)?;
    let tape = model.forward(image, gt, rng, true)?;
    let grads = model.backward(&tape);
    Ok((tape.loss(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::tokenize;
    use crate::nn::init_params;

    fn micro() -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig::micro();
        (cfg, init_params(&cfg.param_specs(), 5))
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let s = cfg.image_size;
        Tensor::from_vec(&[3, s, s], (0..3 * s * s).map(|_| rng.next_f64()).collect()).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let cfg = ModelConfig { image_size: 128, ..ModelConfig::micro() };
        let params: ModelParams<f32> = init_params(&cfg.param_specs(), 1);
        let model = Model::new(&cfg, &params).unwrap();
        let out = model.encode(&Tensor::full(&[3, 128, 128], 0.5)).unwrap();
        assert_eq!(out.nu.shape(), &[256, 4]);
        assert_eq!(out.grid, (16, 16));
        for i in 0..256 {
            for c in 0..4 {
                assert!(out.pooled[c] >= out.nu.row(i)[c]);
            }
        }
        assert!(model.encode(&Tensor::zeros(&[3, 64, 64])).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let (cfg, params) = micro();
        let model = Model::new(&cfg, &params).unwrap();
        let out = model.encode(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(out.nu.data().iter().all(|&v| v == 0.0));
        assert!(out.pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_even_stop_odds() {
        let (cfg, mut params) = micro();
        params.tensors.values_mut().for_each(|t| t.fill(0.0));
        let model = Model::new(&cfg, &params).unwrap();
        let vp = vec![0.0; cfg.feature_dim()];
        let s = model.block_step(BlockInput::Pooled(&vp)).unwrap();
        assert_eq!(s.p, vec![0.5, 0.5]);
        assert!(!s.wants_stop());
        assert!(s.h.iter().chain(&s.c).all(|&v| v == 0.0));
        assert_eq!(s, model.block_step(BlockInput::Pooled(&vp)).unwrap());
    }

    #[test]
    fn uniform_predictions_give_log_loss() {
        let (cfg, mut params) = micro();
        for name in ["block.stop.w", "tok.out.w"] {
            params.get_mut(name).unwrap().fill(0.0);
        }
        let gt = tokenize("stack { row { label btn } row { img } row { text check switch } }").unwrap();
        let model = Model::new(&cfg, &params).unwrap();
        let tape = model.forward(&image(&cfg, 2), &gt, &mut SplitMix64::new(0), true).unwrap();
        assert_eq!(tape.block_count(), 3);
        assert_eq!(tape.token_count(), 6 + 5 + 7);
        let expected = 3.0 * 2f64.ln() + 18.0 * 13f64.ln();
        assert!((tape.loss() - expected).abs() < 1e-9, "{} vs {expected}", tape.loss());
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, params) = micro();
        let gt = tokenize("stack { row { slider } row { img btn } }").unwrap();
        let img = image(&cfg, 9);
        let (a, ga) = forward_train(&cfg, &params, &img, &gt, &mut SplitMix64::new(3)).unwrap();
        let (b, gb) = forward_train(&cfg, &params, &img, &gt, &mut SplitMix64::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert!(a > 0.0 && a.is_finite());
        assert_eq!(ga.tensors.len(), cfg.param_specs().len());
    }

    #[test]
    fn rejects_bad_ground_truth() {
        let (cfg, params) = micro();
        let bad = tokenize("stack { row { } }").unwrap();
        let err = forward_train(&cfg, &params, &image(&cfg, 1), &bad, &mut SplitMix64::new(0));
        assert!(matches!(err, Err(ModelError::NotAProgram(_))));
    }

    #[test]
    fn teacher_forcing_row_count() {
        let (cfg, params) = micro();
        let model = Model::new(&cfg, &params).unwrap();
        let rows = model.token_logits(&[0.1, 0.2, 0.3, 0.4], &[5, 2, 6, 3, 1]).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.len() == 13));
    }

    #[test]
    fn greedy_block_end_dominates() {
        let (cfg, mut params) = micro();
        params.get_mut("tok.out.w").unwrap().fill(0.0);
        let b = params.get_mut("tok.out.b").unwrap();
        b.fill(0.0);
        b.data_mut()[BLOCK_END] = 10.0;
        let model = Model::new(&cfg, &params).unwrap();
        let (toks, _, truncated) = model.token_greedy(&[0.3; 4]).unwrap();
        assert_eq!(toks, vec![BLOCK_END]);
        assert!(!truncated);

        let b = params.get_mut("tok.out.b").unwrap();
        b.data_mut()[BLOCK_END] = -10.0;
        b.data_mut()[6] = 10.0;
        let model = Model::new(&cfg, &params).unwrap();
        let (toks, _, truncated) = model.token_greedy(&[0.3; 4]).unwrap();
        assert_eq!(toks.len(), cfg.max_tokens);
        assert!(truncated);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.5f32, 0.5]), 0);
    }
}

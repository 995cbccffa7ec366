use crate::dsl::VOCAB_SIZE;
use crate::nn::{Init, ModelParams, NnError, ParamSpec};
use crate::tensor::Scalar;

/// Architecture and decoding limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Square input side; must be a multiple of 8.
    pub image_size: usize,
    /// Output channels of the three conv stages. The last is the region
    /// feature width `D`.
    pub conv_widths: [usize; 3],
    /// Hidden size `H` of the block LSTM and both token LSTM layers.
    pub hidden: usize,
    /// Input size `E` of the LSTMs.
    pub embed: usize,
    /// Attention hidden width `A`.
    pub attn: usize,
    pub vocab: usize,
    pub max_blocks: usize,
    pub max_tokens: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Laptop-scale preset: 64x64 inputs, `H = E = 64`, `A = 32`, `D = 32`.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            conv_widths: [32, 32, 32],
            hidden: 64,
            embed: 64,
            attn: 32,
            vocab: VOCAB_SIZE,
            max_blocks: 10,
            max_tokens: 16,
            dropout: 0.5,
        }
    }

    /// Full-size preset: 256x256 inputs, conv widths 32/64/128, `H = E = 512`.
    pub fn paper() -> Self {
        ModelConfig {
            image_size: 256,
            conv_widths: [32, 64, 128],
            hidden: 512,
            embed: 512,
            attn: 256,
            vocab: VOCAB_SIZE,
            max_blocks: 16,
            max_tokens: 32,
            dropout: 0.5,
        }
    }

    /// Tiny network used for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 32,
            conv_widths: [1, 2, 4],
            hidden: 8,
            embed: 8,
            attn: 4,
            vocab: VOCAB_SIZE,
            max_blocks: 4,
            max_tokens: 8,
            dropout: 0.5,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_widths[2]
    }

    /// Side of the final feature map.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn regions(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [self.hidden, self.embed, self.attn, self.vocab, self.max_blocks, self.max_tokens];
        if dims.contains(&0) || self.conv_widths.contains(&0) {
            return Err("all model dimensions must be positive".into());
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(format!("vocab must be {VOCAB_SIZE}"));
        }
        Ok(())
    }

    /// Recovers the architecture from parameter shapes. Limits, dropout and
    /// image size come from `base`.
    pub fn from_params<F: Scalar>(params: &ModelParams<F>, base: &ModelConfig) -> Result<Self, NnError> {
        let dim = |name: &str, axis: usize| params.get(name).map(|t| t.shape().get(axis).copied().unwrap_or(0));
        let cfg = ModelConfig {
            conv_widths: [dim(names::ENC_CONV[0].0, 0)?, dim(names::ENC_CONV[1].0, 0)?, dim(names::ENC_CONV[2].0, 0)?],
            hidden: dim(names::BLOCK_OUT.0, 0)?,
            embed: dim(names::BLOCK_IN_V.0, 0)?,
            attn: dim(names::ATTN_WV, 0)?,
            vocab: dim(names::TOK_OUT.0, 0)?,
            ..*base
        };
        params.check_specs(&cfg.param_specs())?;
        Ok(cfg)
    }

    /// Every parameter with its shape and initializer, in draw order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, h, e, a, k) = (self.feature_dim(), self.hidden, self.embed, self.attn, self.vocab);
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (&(w, b), &c_out) in names::ENC_CONV.iter().zip(&self.conv_widths) {
            specs.push(ParamSpec::new(w, &[c_out, c_in, 3, 3], Init::Glorot { fan_in: c_in * 9, fan_out: c_out * 9 }));
            specs.push(ParamSpec::new(b, &[c_out], Init::Zeros));
            c_in = c_out;
        }
        let lstm = |specs: &mut Vec<ParamSpec>, (w, b): (&str, &str), inp: usize| {
            specs.push(ParamSpec::new(w, &[4 * h, inp + h], Init::Glorot { fan_in: inp + h, fan_out: 4 * h }));
            specs.push(ParamSpec::new(b, &[4 * h], Init::LstmBias { hidden: h }));
        };
        let push_affine = |specs: &mut Vec<ParamSpec>, (w, b): (&str, &str), out: usize, inp: usize| {
            specs.push(ParamSpec::new(w, &[out, inp], Init::Glorot { fan_in: inp, fan_out: out }));
            specs.push(ParamSpec::new(b, &[out], Init::Zeros));
        };
        push_affine(&mut specs, names::BLOCK_IN_V, e, d);
        push_affine(&mut specs, names::BLOCK_IN_O, e, h);
        lstm(&mut specs, names::BLOCK_LSTM, e);
        push_affine(&mut specs, names::BLOCK_OUT, h, h);
        push_affine(&mut specs, names::BLOCK_STOP, 2, h);
        specs.push(ParamSpec::new(names::ATTN_WV, &[a, d], Init::Glorot { fan_in: d, fan_out: a }));
        specs.push(ParamSpec::new(names::ATTN_WH, &[a, h], Init::Glorot { fan_in: h, fan_out: a }));
        specs.push(ParamSpec::new(names::ATTN_B, &[a], Init::Zeros));
        specs.push(ParamSpec::new(names::ATTN_WS, &[a], Init::Glorot { fan_in: a, fan_out: 1 }));
        push_affine(&mut specs, names::TOK_IN_V, e, d);
        push_affine(&mut specs, names::TOK_EMBED, e, k);
        lstm(&mut specs, names::TOK_LSTM1, e);
        lstm(&mut specs, names::TOK_LSTM2, h);
        push_affine(&mut specs, names::TOK_OUT, k, h);
        specs
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Parameter names as `(weight, bias)` pairs.
pub mod names {
    pub const ENC_CONV: [(&str, &str); 3] = [
        ("enc.conv1.w", "enc.conv1.b"),
        ("enc.conv2.w", "enc.conv2.b"),
        ("enc.conv3.w", "enc.conv3.b"),
    ];
    /// Pooled image vector to the first block-LSTM input.
    pub const BLOCK_IN_V: (&str, &str) = ("block.in_v.w", "block.in_v.b");
    /// Previous block output to the next block-LSTM input.
    pub const BLOCK_IN_O: (&str, &str) = ("block.in_o.w", "block.in_o.b");
    pub const BLOCK_LSTM: (&str, &str) = ("block.lstm.w", "block.lstm.b");
    /// Hidden state to the sigmoid block output.
    pub const BLOCK_OUT: (&str, &str) = ("block.out.w", "block.out.b");
    /// Hidden state to CONTINUE/STOP logits.
    pub const BLOCK_STOP: (&str, &str) = ("block.stop.w", "block.stop.b");
    pub const ATTN_WV: &str = "attn.wv";
    pub const ATTN_WH: &str = "attn.wh";
    pub const ATTN_B: &str = "attn.b";
    pub const ATTN_WS: &str = "attn.ws";
    /// Attended features to the first token-LSTM input.
    pub const TOK_IN_V: (&str, &str) = ("tok.in_v.w", "tok.in_v.b");
    /// One-hot previous token to later token-LSTM inputs.
    pub const TOK_EMBED: (&str, &str) = ("tok.embed.w", "tok.embed.b");
    pub const TOK_LSTM1: (&str, &str) = ("tok.lstm1.w", "tok.lstm1.b");
    pub const TOK_LSTM2: (&str, &str) = ("tok.lstm2.w", "tok.lstm2.b");
    pub const TOK_OUT: (&str, &str) = ("tok.out.w", "tok.out.b");
}

//! Inference: the block decoder runs greedily on its stop head and each
//! block's tokens are decoded greedily or with a beam.

use std::cmp::Ordering;

use super::network::{BlockInput, BlockState, Model, ModelError, TokenInput, TokenState};
use crate::dsl::{self, ProgramAst, TokenId, BLOCK_END};
use crate::nn::ops::log_softmax;
use crate::tensor::{Scalar, Tensor};

/// How each block's tokens are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl Strategy {
    /// `Beam(1)` and `Greedy` are the same search.
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            Strategy::Greedy
        } else {
            Strategy::Beam(width)
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Greedy => write!(f, "greedy"),
            Strategy::Beam(k) => write!(f, "beam={k}"),
        }
    }
}

/// A decoded block with its log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    /// Hit the token limit without `BLOCK-END`.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct DecodeResult<F> {
    pub blocks: Vec<Hypothesis>,
    /// Attention weights per block, `grid.0 * grid.1` values each.
    pub alphas: Vec<Vec<F>>,
    pub vhats: Vec<Vec<F>>,
    /// `P(STOP)` after each block.
    pub stop_probs: Vec<F>,
    pub grid: (usize, usize),
}

impl<F: Scalar> DecodeResult<F> {
    /// Concatenated block tokens, without validation.
    pub fn raw_tokens(&self) -> Vec<TokenId> {
        self.blocks.iter().flat_map(|b| b.tokens.iter().copied()).collect()
    }

    /// The predicted program as a flat token sequence (may not parse).
    pub fn program_tokens(&self) -> Vec<TokenId> {
        let blocks: Vec<Vec<TokenId>> = self.blocks.iter().map(|b| b.tokens.clone()).collect();
        dsl::deblockify_lenient(&dsl::BlockSeq(blocks)).into_ids()
    }

    /// The closest well-formed program.
    pub fn program(&self) -> ProgramAst {
        dsl::repair(&self.program_tokens())
    }

    pub fn score(&self) -> f64 {
        self.blocks.iter().map(|b| b.score).sum()
    }
}

/// Orders by score descending, then by token sequence so that ties go to
/// lower ids and then to shorter sequences.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

impl<F: Scalar> Model<'_, F> {
    /// Beam search over one block. Width 1 reproduces greedy decoding, and
    /// a width of at least `vocab^max_tokens` is exhaustive.
    pub fn token_beam(&self, vhat: &[F], width: usize) -> Result<Hypothesis, ModelError> {
        let width = width.max(1);
        let mut live = vec![(Hypothesis { tokens: Vec::new(), score: 0.0, truncated: false }, TokenState::zeros(self.cfg.hidden))];
        let mut finished: Vec<Hypothesis> = Vec::new();
        while !live.is_empty() {
            let mut candidates = Vec::with_capacity(live.len() * self.cfg.vocab);
            for (hyp, state) in &live {
                let input = hyp.tokens.last().map_or(TokenInput::Visual, |&t| TokenInput::Token(t));
                let (logits, next) = self.token_step(input, vhat, state)?;
                let logp = log_softmax(&logits);
                for (tok, &lp) in logp.iter().enumerate() {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push((Hypothesis { tokens, score: hyp.score + lp.as_f64(), truncated: false }, next.clone()));
                }
            }
            candidates.sort_by(|a, b| rank(&a.0, &b.0));
            candidates.truncate(width);
            live.clear();
            for (mut hyp, state) in candidates {
                let ended = hyp.tokens.last() == Some(&BLOCK_END);
                if ended || hyp.tokens.len() >= self.cfg.max_tokens {
                    hyp.truncated = !ended;
                    finished.push(hyp);
                } else {
                    live.push((hyp, state));
                }
            }
        }
        finished.sort_by(rank);
        Ok(finished.swap_remove(0))
    }

    /// Decodes a program from a `[3, S, S]` image.
    pub fn decode(&self, image: &Tensor<F>, strategy: Strategy) -> Result<DecodeResult<F>, ModelError> {
        let enc = self.encode(image)?;
        let proj = self.project(&enc.nu)?;
        let mut out = DecodeResult { blocks: Vec::new(), alphas: Vec::new(), vhats: Vec::new(), stop_probs: Vec::new(), grid: enc.grid };
        let mut prev: Option<BlockState<F>> = None;
        for _ in 0..self.cfg.max_blocks {
            let input = match &prev {
                None => BlockInput::Pooled(&enc.pooled),
                Some(s) => BlockInput::Previous(s),
            };
            let state = self.block_step(input)?;
            let (alpha, vhat) = self.attend(&enc.nu, &proj, &state.h)?;
            let hyp = match strategy {
                Strategy::Greedy => {
                    let (tokens, score, truncated) = self.token_greedy(&vhat)?;
                    Hypothesis { tokens, score: score.as_f64(), truncated }
                }
                Strategy::Beam(k) => self.token_beam(&vhat, k)?,
            };
            out.blocks.push(hyp);
            out.alphas.push(alpha);
            out.vhats.push(vhat);
            out.stop_probs.push(state.p[super::network::STOP]);
            let stop = state.wants_stop();
            prev = Some(state);
            if stop {
                break;
            }
        }
        Ok(out)
    }

    /// Log-probability of a fixed token sequence for one block.
    pub fn block_score(&self, vhat: &[F], tokens: &[TokenId]) -> Result<f64, ModelError> {
        let rows = self.token_logits(vhat, tokens)?;
        Ok(rows.iter().zip(tokens).map(|(r, &t)| log_softmax(r)[t].as_f64()).sum())
    }
}

//! Autoregressive transformer language model.
//!
//! Pre-norm blocks: `x += MHA(LN(x))` then `x += FFN(LN(x))`, learned
//! positional embeddings, and an output head tied to the token embedding.
//! Linear projections carry no bias; layernorms carry gain and bias. When a
//! control code is supplied, every attention and feed-forward sublayer output
//! is augmented by the fused adapter output for that insertion site (the
//! adapters read the same normalized input the sublayer reads).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::Site;
use crate::fusion::FusedContext;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{params_checksum, ParamTensor, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {n} exceeds context length {n_ctx}")]
    SequenceTooLong { n: usize, n_ctx: usize },
    #[error("sequence too short: need at least {need} tokens, got {got}")]
    SequenceTooShort { need: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Structural hyperparameters of the language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// `d_ff` defaults to `4 * dim`.
    pub fn new(n_layers: usize, dim: usize, n_heads: usize, vocab_size: usize, n_ctx: usize) -> Self {
        ModelConfig {
            n_layers,
            dim,
            n_heads,
            vocab_size,
            n_ctx,
            d_ff: 4 * dim,
        }
    }

    /// The desk-scale default: 4 layers, width 64, 4 heads, context 128.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig::new(4, 64, 4, vocab_size, 128)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.dim == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.d_ff == 0
        {
            return Err(ModelError::BadConfig("all dimensions must be positive".into()));
        }
        if self.n_ctx < 2 {
            return Err(ModelError::BadConfig("n_ctx must be at least 2".into()));
        }
        if self.dim % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count; asserted against the allocated buffers at
    /// checkpoint load.
    pub fn param_count(&self) -> usize {
        let (l, d, dff) = (self.n_layers, self.dim, self.d_ff);
        let per_layer = 4 * d * d + 2 * d * dff + 4 * d;
        self.vocab_size * d + self.n_ctx * d + l * per_layer + 2 * d
    }
}

/// A validated token sequence: every id below the vocab size, length within
/// the context window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>, cfg: &ModelConfig) -> Result<Self> {
        validate_tokens(&ids, cfg)?;
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn validate_tokens(ids: &[usize], cfg: &ModelConfig) -> Result<()> {
    if ids.len() > cfg.n_ctx {
        return Err(ModelError::SequenceTooLong {
            n: ids.len(),
            n_ctx: cfg.n_ctx,
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<S> {
    pub gain: ParamTensor<S>,
    pub bias: ParamTensor<S>,
}

impl<S: Scalar> NormParams<S> {
    fn unit(d: usize) -> Self {
        NormParams {
            gain: ParamTensor::full(vec![d], S::ONE),
            bias: ParamTensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub wq: ParamTensor<S>,
    pub wk: ParamTensor<S>,
    pub wv: ParamTensor<S>,
    pub wo: ParamTensor<S>,
    pub w1: ParamTensor<S>,
    pub w2: ParamTensor<S>,
    pub norm1: NormParams<S>,
    pub norm2: NormParams<S>,
}

/// The frozen base language model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<S> {
    pub cfg: ModelConfig,
    pub tok_emb: ParamTensor<S>,
    pub pos_emb: ParamTensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_norm: NormParams<S>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> TransformerModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, &[0x6c6d]);
        let d = cfg.dim;
        let tok_emb = ParamTensor::randn(&mut rng, vec![cfg.vocab_size, d], INIT_STD);
        let pos_emb = ParamTensor::randn(&mut rng, vec![cfg.n_ctx, d], INIT_STD);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                wq: ParamTensor::randn(&mut rng, vec![d, d], INIT_STD),
                wk: ParamTensor::randn(&mut rng, vec![d, d], INIT_STD),
                wv: ParamTensor::randn(&mut rng, vec![d, d], INIT_STD),
                wo: ParamTensor::randn(&mut rng, vec![d, d], INIT_STD),
                w1: ParamTensor::randn(&mut rng, vec![d, cfg.d_ff], INIT_STD),
                w2: ParamTensor::randn(&mut rng, vec![cfg.d_ff, d], INIT_STD),
                norm1: NormParams::unit(d),
                norm2: NormParams::unit(d),
            })
            .collect();
        let final_norm = NormParams::unit(d);
        Ok(TransformerModel {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
        })
    }

    /// Parameters in a fixed order, with checkpoint-style names.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor<S>)> {
        let mut out: Vec<(String, &ParamTensor<S>)> = vec![
            ("model/tok_emb".into(), &self.tok_emb),
            ("model/pos_emb".into(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("model/layer/{l}/wq"), &b.wq));
            out.push((format!("model/layer/{l}/wk"), &b.wk));
            out.push((format!("model/layer/{l}/wv"), &b.wv));
            out.push((format!("model/layer/{l}/wo"), &b.wo));
            out.push((format!("model/layer/{l}/w1"), &b.w1));
            out.push((format!("model/layer/{l}/w2"), &b.w2));
            out.push((format!("model/layer/{l}/norm1/gain"), &b.norm1.gain));
            out.push((format!("model/layer/{l}/norm1/bias"), &b.norm1.bias));
            out.push((format!("model/layer/{l}/norm2/gain"), &b.norm2.gain));
            out.push((format!("model/layer/{l}/norm2/bias"), &b.norm2.bias));
        }
        out.push(("model/final_norm/gain".into(), &self.final_norm.gain));
        out.push(("model/final_norm/bias".into(), &self.final_norm.bias));
        out
    }

    /// Mutable parameter buffers in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.w1);
            out.push(&mut b.w2);
            out.push(&mut b.norm1.gain);
            out.push(&mut b.norm1.bias);
            out.push(&mut b.norm2.gain);
            out.push(&mut b.norm2.bias);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    pub fn allocated_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// FNV-1a over every parameter bit, in named order. The frozen-base
    /// contract compares this before and after adapter training.
    pub fn checksum(&self) -> u64 {
        params_checksum(self.named_params().into_iter().map(|(_, p)| p))
    }

    /// Push all parameters onto a tape. Returns structured handles plus the
    /// flat id list aligned with [`Self::named_params`].
    pub fn stage(&self, tape: &mut Tape<S>, trainable: bool) -> Result<StagedModel> {
        let tok_emb = self.tok_emb.stage(tape, trainable)?;
        let pos_emb = self.pos_emb.stage(tape, trainable)?;
        let mut flat = vec![tok_emb, pos_emb];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = BlockHandles {
                wq: b.wq.stage(tape, trainable)?,
                wk: b.wk.stage(tape, trainable)?,
                wv: b.wv.stage(tape, trainable)?,
                wo: b.wo.stage(tape, trainable)?,
                w1: b.w1.stage(tape, trainable)?,
                w2: b.w2.stage(tape, trainable)?,
                norm1_gain: b.norm1.gain.stage(tape, trainable)?,
                norm1_bias: b.norm1.bias.stage(tape, trainable)?,
                norm2_gain: b.norm2.gain.stage(tape, trainable)?,
                norm2_bias: b.norm2.bias.stage(tape, trainable)?,
            };
            flat.extend([
                h.wq, h.wk, h.wv, h.wo, h.w1, h.w2, h.norm1_gain, h.norm1_bias, h.norm2_gain,
                h.norm2_bias,
            ]);
            blocks.push(h);
        }
        let final_gain = self.final_norm.gain.stage(tape, trainable)?;
        let final_bias = self.final_norm.bias.stage(tape, trainable)?;
        flat.extend([final_gain, final_bias]);
        Ok(StagedModel {
            cfg: self.cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_gain,
            final_bias,
            flat,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockHandles {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
    pub norm1_gain: TensorId,
    pub norm1_bias: TensorId,
    pub norm2_gain: TensorId,
    pub norm2_bias: TensorId,
}

/// Tape handles for one staged copy of the model.
#[derive(Debug, Clone)]
pub struct StagedModel {
    pub cfg: ModelConfig,
    pub tok_emb: TensorId,
    pub pos_emb: TensorId,
    pub blocks: Vec<BlockHandles>,
    pub final_gain: TensorId,
    pub final_bias: TensorId,
    /// All handles in [`TransformerModel::named_params`] order.
    pub flat: Vec<TensorId>,
}

impl StagedModel {
    /// Causal multi-head attention sublayer on `x[n,d]` (no normalization,
    /// no residual): projections, masked attention, output projection.
    pub fn mha_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: TensorId,
        layer: usize,
    ) -> Result<TensorId> {
        let n = tape.shape(x)[0];
        if n > self.cfg.n_ctx {
            return Err(ModelError::SequenceTooLong {
                n,
                n_ctx: self.cfg.n_ctx,
            });
        }
        let blk = &self.blocks[layer];
        let q = tape.matmul(x, blk.wq)?;
        let k = tape.matmul(x, blk.wk)?;
        let v = tape.matmul(x, blk.wv)?;
        let core = tape.attention(q, k, v, self.cfg.n_heads, true)?;
        Ok(tape.matmul(core, blk.wo)?)
    }

    /// Position-wise feed-forward sublayer on `x[n,d]`: two linear maps with
    /// a ReLU in between.
    pub fn ffn_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: TensorId,
        layer: usize,
    ) -> Result<TensorId> {
        let blk = &self.blocks[layer];
        let hidden = tape.matmul(x, blk.w1)?;
        let hidden = tape.relu(hidden)?;
        Ok(tape.matmul(hidden, blk.w2)?)
    }

    /// Forward pass to next-token logits `[n, vocab]`. Row i is the
    /// distribution for position i+1. With a fused context, each sublayer
    /// output gains the weighted adapter combination for its site.
    pub fn lm_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        tokens: &[usize],
        fused: Option<&FusedContext>,
    ) -> Result<TensorId> {
        if tokens.is_empty() {
            return Err(ModelError::SequenceTooShort { need: 1, got: 0 });
        }
        validate_tokens(tokens, &self.cfg)?;
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let tok = tape.gather_rows(self.tok_emb, tokens)?;
        let pos = tape.gather_rows(self.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;

        for (l, blk) in self.blocks.iter().enumerate() {
            // Attention sublayer; the adapters read the normalized input.
            let a_in = tape.layernorm(x, blk.norm1_gain, blk.norm1_bias)?;
            let mut delta = self.mha_forward(tape, a_in, l)?;
            if let Some(ctx) = fused {
                let adapted = ctx.site_output(tape, l, Site::Mha, a_in)?;
                delta = tape.add(delta, adapted)?;
            }
            x = tape.add(x, delta)?;

            // Feed-forward sublayer.
            let f_in = tape.layernorm(x, blk.norm2_gain, blk.norm2_bias)?;
            let mut delta = self.ffn_forward(tape, f_in, l)?;
            if let Some(ctx) = fused {
                let adapted = ctx.site_output(tape, l, Site::Ffn, f_in)?;
                delta = tape.add(delta, adapted)?;
            }
            x = tape.add(x, delta)?;
        }

        let x = tape.layernorm(x, self.final_gain, self.final_bias)?;
        // Tied output head.
        Ok(tape.matmul_nt(x, self.tok_emb)?)
    }

    /// Mean next-token negative log-likelihood: rows 0..n-1 of the logits
    /// predict tokens 1..n.
    pub fn lm_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        tokens: &[usize],
        fused: Option<&FusedContext>,
    ) -> Result<TensorId> {
        if tokens.len() < 2 {
            return Err(ModelError::SequenceTooShort {
                need: 2,
                got: tokens.len(),
            });
        }
        let logits = self.lm_forward(tape, tokens, fused)?;
        let context_rows: Vec<usize> = (0..tokens.len() - 1).collect();
        let pred = tape.gather_rows(logits, &context_rows)?;
        Ok(tape.cross_entropy(pred, &tokens[1..])?)
    }
}

/// Mean NLL of a token set under a model, outside any training loop.
pub fn mean_nll<S: Scalar>(model: &TransformerModel<S>, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let mut tape: Tape<S> = Tape::new();
        let staged = model.stage(&mut tape, false)?;
        let loss = staged.lm_loss(&mut tape, seq, None)?;
        total += tape.scalar(loss).to_f64() * (seq.len() - 1) as f64;
        count += seq.len() - 1;
    }
    Ok(total / count.max(1) as f64)
}

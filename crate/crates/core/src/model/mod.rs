//! The five-block speech translation model with a tied vocabulary embedding.
//!
//! ```text
//!   s ─ speech encoder ─ alignment adapter ─┬─ CTC log-probs (· Eᵀ)
//!                                           └─ textual adapter ─ A(s) ─┐
//!   t/x ─ (E) ─ text encoder ─ M(t) ──────────────────────────────────┴─ decoder ─ logits (· Eᵀ)
//! ```
//!
//! `E` is one `V x D` parameter used as token embedding, text-encoder input,
//! CTC output projection, and decoder output projection.

mod freeze;
mod vocab;

pub use freeze::{freeze_for_phase, Block, FreezeMask, Phase};
pub use vocab::{SharedVocab, TokenId, TokenSeq};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, Activation, AttentionWeights, ConformerBlock, Conv1dLayer,
    ConvSubsampler, DecoderLayer, EncoderLayer, ForwardCtx, LayerConfig, LayerNorm,
    MultiHeadAttention,
};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub layer: LayerConfig,
    /// Stride-2 convolutions in the alignment adapter.
    pub conv_layers: usize,
    pub speech_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 24,
            feature_dim: 16,
            layer: LayerConfig::default(),
            conv_layers: 3,
            speech_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.layer.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for positions".into()));
        }
        SharedVocab::new(self.vocab_size).map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct SpeechEncoder {
    pub frontend: Conv1dLayer,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AlignmentAdapter {
    pub subsampler: ConvSubsampler,
    pub conformer: ConformerBlock,
}

/// Position embedding plus a single post-norm self-attention layer.
#[derive(Clone, Debug)]
pub struct TextualAdapter {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
}

pub struct AlignmentOutput {
    pub hidden: Var,
    pub ctc_log_probs: Var,
    pub attention: AttentionWeights,
}

/// Every intermediate of the speech path, for losses and analysis probes.
pub struct SpeechPath {
    pub frames: Var,
    pub alignment: AlignmentOutput,
    /// `A(s)`.
    pub encoded: Var,
    pub adapter_attention: AttentionWeights,
}

pub struct TextEncoding {
    /// `M(t)`.
    pub output: Var,
    pub attention: Vec<AttentionWeights>,
}

pub struct DecoderOutput {
    pub logits: Var,
    pub self_attention: Vec<AttentionWeights>,
    pub cross_attention: Vec<AttentionWeights>,
}

#[derive(Clone, Debug)]
pub struct ModelAssembly {
    pub config: ModelConfig,
    pub vocab: SharedVocab,
    pub store: ParamStore,
    pub shared_embedding: ParamId,
    pub speech_encoder: SpeechEncoder,
    pub alignment_adapter: AlignmentAdapter,
    pub textual_adapter: TextualAdapter,
    pub text_encoder: TextEncoder,
    pub decoder: Decoder,
}

impl ModelAssembly {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = SharedVocab::new(config.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.layer.model_dim;
        let lc = &config.layer;

        let shared_embedding = store.register_normal(
            Block::SharedEmbedding.prefix(),
            &[config.vocab_size, d],
            (1.0 / d as f64).sqrt(),
            &mut rng,
        );

        let sp = Block::SpeechEncoder.prefix();
        let speech_encoder = SpeechEncoder {
            frontend: Conv1dLayer::new(
                &mut store,
                &format!("{sp}.frontend"),
                config.feature_dim,
                d,
                3,
                1,
                &mut rng,
            ),
            layers: (0..config.speech_layers)
                .map(|i| EncoderLayer::new(&mut store, &format!("{sp}.layer{i}"), lc, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(&mut store, &format!("{sp}.final_norm"), d),
        };

        let al = Block::AlignmentAdapter.prefix();
        let alignment_adapter = AlignmentAdapter {
            subsampler: ConvSubsampler::new(
                &mut store,
                &format!("{al}.subsample"),
                d,
                config.conv_layers,
                &mut rng,
            ),
            conformer: ConformerBlock::new(&mut store, &format!("{al}.conformer"), lc, &mut rng),
        };

        let ta = Block::TextualAdapter.prefix();
        let textual_adapter = TextualAdapter {
            attn: MultiHeadAttention::new(&mut store, &format!("{ta}.attn"), lc, &mut rng),
            norm: LayerNorm::new(&mut store, &format!("{ta}.norm"), d),
        };

        let te = Block::TextEncoder.prefix();
        let text_encoder = TextEncoder {
            layers: (0..config.text_layers)
                .map(|i| EncoderLayer::new(&mut store, &format!("{te}.layer{i}"), lc, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(&mut store, &format!("{te}.final_norm"), d),
        };

        let de = Block::Decoder.prefix();
        let decoder = Decoder {
            layers: (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(&mut store, &format!("{de}.layer{i}"), lc, &mut rng))
                .collect(),
            final_norm: LayerNorm::new(&mut store, &format!("{de}.final_norm"), d),
        };

        Ok(ModelAssembly {
            config,
            vocab,
            store,
            shared_embedding,
            speech_encoder,
            alignment_adapter,
            textual_adapter,
            text_encoder,
            decoder,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.config.layer.model_dim
    }

    pub fn block_params(&self, block: Block) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| Block::of_param(&p.name) == Some(block))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn optimizer_params(&self, phase: Phase) -> Vec<ParamId> {
        let blocks = phase.optimizer_blocks();
        self.store
            .iter()
            .filter(|(_, p)| Block::of_param(&p.name).is_some_and(|b| blocks.contains(&b)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Sets every parameter's `requires_grad` from its block's flag.
    pub fn apply_freeze(&mut self, mask: &FreezeMask) {
        let ids: Vec<(ParamId, bool)> = self
            .store
            .iter()
            .map(|(id, p)| {
                let b = Block::of_param(&p.name).expect("every parameter belongs to a block");
                (id, mask.is_trainable(b))
            })
            .collect();
        for (id, flag) in ids {
            self.store.set_requires_grad(id, flag);
        }
    }

    /// Frames `T x feature_dim` to hidden states `T x D`.
    pub fn speech_encoder_forward(
        &self,
        t: &Tape,
        speech: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if speech.rank() != 2 || speech.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "speech input must be a non-empty T x F matrix, got {:?}",
                speech.shape()
            )));
        }
        if speech.cols() != self.config.feature_dim {
            return Err(Error::shape(
                "speech encoder",
                format!("feature dim {} != {}", speech.cols(), self.config.feature_dim),
            ));
        }
        let s = &self.store;
        let enc = &self.speech_encoder;
        let x = t.constant(speech.clone());
        let h = Activation::Gelu.apply(t, enc.frontend.forward(t, s, x)?);
        let len = t.shape(h)[0];
        let mut h = t.add_const(h, &sinusoidal_positions(len, self.model_dim())?);
        h = ctx.dropout(t, h);
        for layer in &enc.layers {
            h = layer.forward(t, s, h, ctx)?.0;
        }
        Ok(enc.final_norm.forward(t, s, h))
    }

    /// Down-samples frames and projects them onto the shared vocabulary.
    pub fn alignment_adapter_forward(
        &self,
        t: &Tape,
        frames: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<AlignmentOutput> {
        let s = &self.store;
        let ad = &self.alignment_adapter;
        let h = ad.subsampler.forward(t, s, frames)?;
        let len = t.shape(h)[0];
        let h = t.add_const(h, &sinusoidal_positions(len, self.model_dim())?);
        let (hidden, attention) = ad.conformer.forward(t, s, h, ctx)?;
        let e = t.param(s, self.shared_embedding);
        let ctc_log_probs = t.log_softmax_rows(t.matmul_nt(hidden, e));
        Ok(AlignmentOutput {
            hidden,
            ctc_log_probs,
            attention,
        })
    }

    pub fn textual_adapter_forward(
        &self,
        t: &Tape,
        hidden: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, AttentionWeights)> {
        let s = &self.store;
        let len = t.shape(hidden)[0];
        let x = t.add_const(hidden, &sinusoidal_positions(len, self.model_dim())?);
        let (a, w) = self.textual_adapter.attn.forward(t, s, x, x, None, ctx)?;
        let y = t.add(x, ctx.dropout(t, a));
        Ok((self.textual_adapter.norm.forward(t, s, y), w))
    }

    /// `A(s)`: speech encoder, alignment adapter hidden states, textual adapter.
    pub fn st_encode(&self, t: &Tape, speech: &Tensor, ctx: &mut ForwardCtx) -> Result<SpeechPath> {
        let frames = self.speech_encoder_forward(t, speech, ctx)?;
        let alignment = self.alignment_adapter_forward(t, frames, ctx)?;
        let (encoded, adapter_attention) = self.textual_adapter_forward(t, alignment.hidden, ctx)?;
        Ok(SpeechPath {
            frames,
            alignment,
            encoded,
            adapter_attention,
        })
    }

    fn embed(&self, t: &Tape, tokens: &[TokenId], ctx: &mut ForwardCtx) -> Result<Var> {
        self.vocab.check(tokens)?;
        let e = t.param(&self.store, self.shared_embedding);
        let d = self.model_dim();
        let x = t.scale(t.gather_rows(e, tokens), (d as f64).sqrt());
        let x = t.add_const(x, &sinusoidal_positions(tokens.len(), d)?);
        Ok(ctx.dropout(t, x))
    }

    /// `M(t)`. Blank ids are ordinary inputs here.
    pub fn text_encoder_forward(
        &self,
        t: &Tape,
        tokens: &[TokenId],
        ctx: &mut ForwardCtx,
    ) -> Result<TextEncoding> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("text encoder input is empty".into()));
        }
        let s = &self.store;
        let mut h = self.embed(t, tokens, ctx)?;
        let mut attention = Vec::with_capacity(self.text_encoder.layers.len());
        for layer in &self.text_encoder.layers {
            let (o, w) = layer.forward(t, s, h, ctx)?;
            h = o;
            attention.push(w);
        }
        Ok(TextEncoding {
            output: self.text_encoder.final_norm.forward(t, s, h),
            attention,
        })
    }

    /// Causal logits `|prefix| x V` given encoder memory from either path.
    /// Columns of `SharedVocab::decoder_excluded` are `-inf`.
    pub fn decoder_forward(
        &self,
        t: &Tape,
        memory: Var,
        prefix: &[TokenId],
        ctx: &mut ForwardCtx,
    ) -> Result<DecoderOutput> {
        match prefix.first() {
            None => return Err(Error::InvalidArgument("decoder prefix is empty".into())),
            Some(&b) if b != self.vocab.bos => {
                return Err(Error::InvalidArgument(format!(
                    "decoder prefix must start with bos ({}), got {b}",
                    self.vocab.bos
                )))
            }
            _ => {}
        }
        let s = &self.store;
        let mut h = self.embed(t, prefix, ctx)?;
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for layer in &self.decoder.layers {
            let out = layer.forward(t, s, h, memory, ctx)?;
            h = out.hidden;
            self_attention.push(out.self_attention);
            cross_attention.push(out.cross_attention);
        }
        let h = self.decoder.final_norm.forward(t, s, h);
        let e = t.param(s, self.shared_embedding);
        let mut mask = Tensor::zeros(&[prefix.len(), self.vocab.size]);
        for r in 0..prefix.len() {
            for id in self.vocab.decoder_excluded() {
                mask.row_mut(r)[id] = f64::NEG_INFINITY;
            }
        }
        Ok(DecoderOutput {
            logits: t.add_const(t.matmul_nt(h, e), &mask),
            self_attention,
            cross_attention,
        })
    }
}

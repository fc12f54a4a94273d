use rand::Rng;

use super::{
    causal_mask, check_cols, Activation, AttentionWeights, FeedForward, ForwardCtx, LayerConfig,
    LayerNorm, Linear, MultiHeadAttention,
};
use crate::error::Result;
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub dim: usize,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LayerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        EncoderLayer {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, Activation::Gelu, rng),
            dim: d,
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, AttentionWeights)> {
        check_cols(t, x, self.dim, "encoder layer")?;
        let h = self.attn_norm.forward(t, s, x);
        let (a, w) = self.attn.forward(t, s, h, h, None, ctx)?;
        let x = t.add(x, ctx.dropout(t, a));
        let h = self.ffn_norm.forward(t, s, x);
        let f = self.ffn.forward(t, s, h, ctx);
        Ok((t.add(x, ctx.dropout(t, f)), w))
    }
}

pub struct DecoderLayerOutput {
    pub hidden: Var,
    pub self_attention: AttentionWeights,
    pub cross_attention: AttentionWeights,
}

/// Pre-norm transformer decoder layer with causal self-attention.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub dim: usize,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LayerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        DecoderLayer {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, Activation::Gelu, rng),
            dim: d,
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        x: Var,
        memory: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<DecoderLayerOutput> {
        check_cols(t, x, self.dim, "decoder layer")?;
        let len = t.shape(x)[0];
        let mask = causal_mask(len);
        let h = self.self_norm.forward(t, s, x);
        let (a, self_w) = self.self_attn.forward(t, s, h, h, Some(&mask), ctx)?;
        let x = t.add(x, ctx.dropout(t, a));
        let h = self.cross_norm.forward(t, s, x);
        let (c, cross_w) = self.cross_attn.forward(t, s, h, memory, None, ctx)?;
        let x = t.add(x, ctx.dropout(t, c));
        let h = self.ffn_norm.forward(t, s, x);
        let f = self.ffn.forward(t, s, h, ctx);
        Ok(DecoderLayerOutput {
            hidden: t.add(x, ctx.dropout(t, f)),
            self_attention: self_w,
            cross_attention: cross_w,
        })
    }
}

/// Conformer-lite block: macaron half-step feed-forwards around
/// self-attention and a depthwise-convolution module, then a final norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv_norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub depthwise_norm: LayerNorm,
    pub pointwise_out: Linear,
    pub ffn2_norm: LayerNorm,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
    pub dim: usize,
}

impl ConformerBlock {
    pub const DEPTHWISE_KERNEL: usize = 3;

    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LayerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let k = Self::DEPTHWISE_KERNEL;
        ConformerBlock {
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1_norm"), d),
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), d, cfg.ffn_dim, Activation::Silu, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng),
            conv_norm: LayerNorm::new(store, &format!("{name}.conv_norm"), d),
            pointwise_in: Linear::new(store, &format!("{name}.pw_in"), d, 2 * d, rng),
            depthwise_weight: store.register_normal(
                format!("{name}.dw.weight"),
                &[k, d],
                (1.0 / k as f64).sqrt(),
                rng,
            ),
            depthwise_bias: store.register(format!("{name}.dw.bias"), Tensor::zeros(&[d])),
            depthwise_norm: LayerNorm::new(store, &format!("{name}.dw_norm"), d),
            pointwise_out: Linear::new(store, &format!("{name}.pw_out"), d, d, rng),
            ffn2_norm: LayerNorm::new(store, &format!("{name}.ffn2_norm"), d),
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), d, cfg.ffn_dim, Activation::Silu, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
            dim: d,
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, AttentionWeights)> {
        check_cols(t, x, self.dim, "conformer block")?;
        let h = self.ffn1.forward(t, s, self.ffn1_norm.forward(t, s, x), ctx);
        let x = t.add(x, t.scale(ctx.dropout(t, h), 0.5));

        let h = self.attn_norm.forward(t, s, x);
        let (a, w) = self.attn.forward(t, s, h, h, None, ctx)?;
        let x = t.add(x, ctx.dropout(t, a));

        let h = self.conv_norm.forward(t, s, x);
        let h = t.glu(self.pointwise_in.forward(t, s, h));
        let dw = t.param(s, self.depthwise_weight);
        let db = t.param(s, self.depthwise_bias);
        let h = t.depthwise_conv1d(h, dw, db);
        let h = t.silu(self.depthwise_norm.forward(t, s, h));
        let h = self.pointwise_out.forward(t, s, h);
        let x = t.add(x, ctx.dropout(t, h));

        let h = self.ffn2.forward(t, s, self.ffn2_norm.forward(t, s, x), ctx);
        let x = t.add(x, t.scale(ctx.dropout(t, h), 0.5));
        Ok((self.final_norm.forward(t, s, x), w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check_with, GradCheckOptions, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> LayerConfig {
        LayerConfig {
            model_dim: 8,
            heads: 2,
            ffn_dim: 12,
            dropout: 0.1,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn conformer_preserves_shape_and_is_deterministic_in_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = ConformerBlock::new(&mut store, "cf", &small_cfg(), &mut rng);
        for len in [1usize, 4, 9] {
            let x = random(len, 8, len as u64);
            let run = || {
                let t = Tape::no_grad();
                let (y, _) = block
                    .forward(&t, &store, t.constant(x.clone()), &mut ForwardCtx::eval())
                    .unwrap();
                (*t.value(y)).clone()
            };
            let a = run();
            assert_eq!(a.shape(), &[len, 8]);
            assert_eq!(a, run());
        }
    }

    #[test]
    fn conformer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = ConformerBlock::new(&mut store, "cf", &small_cfg(), &mut rng);
        let x = store.register("x", random(5, 8, 9));
        let ids: Vec<ParamId> = store.ids().collect();
        let probe = random(5, 8, 10);
        let err = grad_check_with(
            &mut store,
            &ids,
            GradCheckOptions {
                eps: 1e-6,
                max_per_param: Some(6),
                seed: 2,
            },
            |t, s| {
                let (y, _) = block.forward(t, s, t.param(s, x), &mut ForwardCtx::eval())?;
                let p = t.constant(probe.clone());
                Ok(t.sum(t.mul(y, p)))
            },
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn decoder_is_causal_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, "dec", &small_cfg(), &mut rng);
        let mem = random(6, 8, 1);
        let x1 = random(5, 8, 2);
        let mut x2 = x1.clone();
        for j in 0..8 {
            x2.data_mut()[3 * 8 + j] += 0.7;
            x2.data_mut()[4 * 8 + j] -= 1.3;
        }
        let run = |x: &Tensor| {
            let t = Tape::no_grad();
            let out = layer
                .forward(&t, &store, t.constant(x.clone()), t.constant(mem.clone()), &mut ForwardCtx::eval())
                .unwrap();
            let cross = out.cross_attention.clone();
            ((*t.value(out.hidden)).clone(), cross)
        };
        let (a, cross) = run(&x1);
        let (b, _) = run(&x2);
        for i in 0..3 {
            for (p, q) in a.row(i).iter().zip(b.row(i)) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert_ne!(a.row(4), b.row(4));
        for h in &cross.heads {
            for r in 0..h.rows() {
                assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_shape_and_dropout_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "enc", &small_cfg(), &mut rng);
        let x = random(7, 8, 3);
        let t = Tape::no_grad();
        let (e1, _) = layer.forward(&t, &store, t.constant(x.clone()), &mut ForwardCtx::eval()).unwrap();
        let (tr, _) = layer
            .forward(&t, &store, t.constant(x.clone()), &mut ForwardCtx::train(0.1, 9))
            .unwrap();
        assert_eq!(t.shape(e1), vec![7, 8]);
        assert_ne!(*t.value(e1), *t.value(tr));
    }
}

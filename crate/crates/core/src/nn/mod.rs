//! Neural building blocks on top of the tape.
//!
//! Every block owns only [`ParamId`](crate::numcore::ParamId)s; values live in
//! the shared [`ParamStore`](crate::numcore::ParamStore) so a forward pass is a
//! read-only borrow of the store.

mod attention;
mod blocks;
mod conv;
mod layers;
mod positions;

pub use attention::{causal_mask, AttentionWeights, MultiHeadAttention};
pub use blocks::{ConformerBlock, DecoderLayer, DecoderLayerOutput, EncoderLayer};
pub use conv::{downsampled_len, same_padding, ConvSubsampler, Conv1dLayer};
pub use layers::{Activation, FeedForward, LayerNorm, Linear};
pub use positions::sinusoidal_positions;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Width, head count, and dropout shared by attention and feed-forward blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Train/eval switch plus the dropout RNG for one forward pass.
pub struct ForwardCtx {
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            train: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, t: &Tape, x: Var) -> Var {
        if !self.train || self.dropout == 0.0 {
            return x;
        }
        let shape = t.shape(x);
        let keep = 1.0 - self.dropout;
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        t.mul_const(x, Rc::new(Tensor::from_parts(shape, mask)))
    }
}

pub(crate) fn check_cols(t: &Tape, x: Var, expected: usize, what: &'static str) -> Result<()> {
    let shape = t.shape(x);
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::shape(
            what,
            format!("expected rows x {expected}, got {shape:?}"),
        ));
    }
    Ok(())
}

use rand::Rng;

use super::ForwardCtx;
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.register_normal(format!("{name}.weight"), &[in_dim, out_dim], std, rng);
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let w = t.param(s, self.weight);
        let b = t.param(s, self.bias);
        t.add_row(t.matmul(x, w), b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gamma);
        let b = t.param(s, self.beta);
        t.layer_norm(x, g, b, Self::EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Relu,
}

impl Activation {
    pub fn apply(self, t: &Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => t.gelu(x),
            Activation::Silu => t.silu(x),
            Activation::Relu => t.relu(x),
        }
    }
}

/// Position-wise two-layer MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
            activation,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Var {
        let h = self.activation.apply(t, self.fc1.forward(t, s, x));
        let h = ctx.dropout(t, h);
        self.fc2.forward(t, s, h)
    }
}

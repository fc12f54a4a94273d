use rand::Rng;

use super::{check_cols, ForwardCtx, LayerConfig, Linear};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};

/// Per-head attention distributions, each `queries x keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub heads: Vec<Tensor>,
}

impl AttentionWeights {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn queries(&self) -> usize {
        self.heads.first().map_or(0, Tensor::rows)
    }

    pub fn keys(&self) -> usize {
        self.heads.first().map_or(0, Tensor::cols)
    }

    /// Head-averaged weights.
    pub fn mean_over_heads(&self) -> Tensor {
        let mut acc = Tensor::zeros(&[self.queries(), self.keys()]);
        for h in &self.heads {
            acc.add_assign(h);
        }
        acc.scale_in_place(1.0 / self.heads.len().max(1) as f64);
        acc
    }
}

/// `-inf` above the diagonal, zero elsewhere.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LayerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads: cfg.heads,
            dim: d,
        }
    }

    /// Scaled dot-product attention of `query` over `memory`.
    ///
    /// `mask`, when given, is added to the `queries x keys` score matrix of
    /// every head before the softmax.
    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, AttentionWeights)> {
        check_cols(t, query, self.dim, "attention query")?;
        check_cols(t, memory, self.dim, "attention memory")?;
        let (tq, tk) = (t.shape(query)[0], t.shape(memory)[0]);
        if tk == 0 {
            return Err(Error::shape("attention", "empty memory"));
        }
        if let Some(m) = mask {
            if m.shape() != [tq, tk] {
                return Err(Error::shape(
                    "attention mask",
                    format!("expected [{tq}, {tk}], got {:?}", m.shape()),
                ));
            }
        }
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(t, s, query);
        let k = self.k.forward(t, s, memory);
        let v = self.v.forward(t, s, memory);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, lo, hi);
            let kh = t.slice_cols(k, lo, hi);
            let vh = t.slice_cols(v, lo, hi);
            let mut scores = t.scale(t.matmul_nt(qh, kh), scale);
            if let Some(m) = mask {
                scores = t.add_const(scores, m);
            }
            let p = t.softmax_rows(scores);
            weights.push((*t.value(p)).clone());
            let p = ctx.dropout(t, p);
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        Ok((self.out.forward(t, s, cat), AttentionWeights { heads: weights }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(heads: usize) -> (ParamStore, MultiHeadAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = LayerConfig {
            model_dim: 8,
            heads,
            ffn_dim: 16,
            dropout: 0.0,
        };
        let mha = MultiHeadAttention::new(&mut store, "mha", &cfg, &mut rng);
        (store, mha)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn equal_keys_give_uniform_rows() {
        let (store, mha) = setup(2);
        let t = Tape::no_grad();
        let q = t.constant(random(3, 8, 1));
        let row = random(1, 8, 2);
        let mut mem = Vec::new();
        for _ in 0..5 {
            mem.extend_from_slice(row.data());
        }
        let m = t.constant(Tensor::matrix(5, 8, mem).unwrap());
        let (_, w) = mha.forward(&t, &store, q, m, None, &mut ForwardCtx::eval()).unwrap();
        for h in &w.heads {
            for x in h.data() {
                assert!((x - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gives_ones() {
        let (store, mha) = setup(4);
        let t = Tape::no_grad();
        let q = t.constant(random(3, 8, 1));
        let m = t.constant(random(1, 8, 5));
        let (_, w) = mha.forward(&t, &store, q, m, None, &mut ForwardCtx::eval()).unwrap();
        for h in &w.heads {
            assert!(h.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn rows_are_distributions() {
        let (store, mha) = setup(4);
        let t = Tape::no_grad();
        let q = t.constant(random(6, 8, 7));
        let m = t.constant(random(9, 8, 8));
        let (_, w) = mha.forward(&t, &store, q, m, None, &mut ForwardCtx::eval()).unwrap();
        for h in &w.heads {
            for r in 0..h.rows() {
                let row = h.row(r);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (store, mha) = setup(2);
        let t = Tape::no_grad();
        let q = t.constant(random(3, 6, 1));
        let m = t.constant(random(3, 8, 1));
        assert!(mha.forward(&t, &store, q, m, None, &mut ForwardCtx::eval()).is_err());
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 1), f64::NEG_INFINITY);
        assert_eq!(m.get(2, 1), 0.0);
    }
}

use crate::error::{Error, Result};
use crate::model::{ModelAssembly, TokenSeq};
use crate::nn::ForwardCtx;
use crate::numcore::kernels::argmax;
use crate::numcore::{Tape, Tensor, Var};

pub const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarities of mean-pooled sequences divided by `tau`: `B x B`.
pub fn pooled_similarity(t: &Tape, a_batch: &[Var], m_batch: &[Var], tau: f64) -> Result<Var> {
    if a_batch.len() != m_batch.len() {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch sizes differ: {} vs {}",
            a_batch.len(),
            m_batch.len()
        )));
    }
    if a_batch.len() < 2 {
        return Err(Error::BatchTooSmall(a_batch.len()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let pool = |seqs: &[Var]| {
        let pooled: Vec<Var> = seqs.iter().map(|&v| t.mean_rows(v)).collect();
        t.normalize_rows(t.concat_rows(&pooled), NORM_FLOOR)
    };
    let (a, m) = (pool(a_batch), pool(m_batch));
    if t.shape(a)[1] != t.shape(m)[1] {
        return Err(Error::shape("contrastive", "A and M widths differ"));
    }
    Ok(t.scale(t.matmul_nt(a, m), 1.0 / tau))
}

/// Sum over rows of `-s_ii + logsumexp_j s_ij`, where the sum over `j` skips
/// the diagonal unless `include_positive` is set.
pub fn contrastive_from_similarity(t: &Tape, sim: Var, include_positive: bool) -> Var {
    let b = t.shape(sim)[0];
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let pos = t.sum(t.pick(sim, &diag));
    let scores = if include_positive {
        sim
    } else {
        let mut mask = Tensor::zeros(&[b, b]);
        for i in 0..b {
            mask.data_mut()[i * b + i] = f64::NEG_INFINITY;
        }
        t.add_const(sim, &mask)
    };
    t.sub(t.sum(t.logsumexp_rows(scores)), pos)
}

/// In-batch contrastive loss between speech encodings and text encodings.
pub fn contrastive_loss(
    t: &Tape,
    a_batch: &[Var],
    m_batch: &[Var],
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let sim = pooled_similarity(t, a_batch, m_batch, tau)?;
    Ok(contrastive_from_similarity(t, sim, include_positive))
}

/// Per-frame argmax of CTC log-probabilities with blanks and repeats kept.
pub fn blank_retaining_decode(log_probs: &Tensor) -> TokenSeq {
    (0..log_probs.rows()).map(|r| argmax(log_probs.row(r))).collect()
}

/// Text-encoder output computed off the caller's tape; it enters as a constant.
pub fn frozen_text_encoding(model: &ModelAssembly, tokens: &[usize]) -> Result<Tensor> {
    let t = Tape::no_grad();
    let out = model.text_encoder_forward(&t, tokens, &mut ForwardCtx::eval())?.output;
    Ok((*t.value(out)).clone())
}

/// Contrastive loss against the model's own blank-retaining decodes.
///
/// The decode is data: no gradient reaches the argmax or the text encoder.
pub fn kd_contrastive_loss(
    t: &Tape,
    model: &ModelAssembly,
    a_batch: &[Var],
    ctc_log_probs: &[Var],
    tau: f64,
    include_positive: bool,
) -> Result<(Var, Vec<TokenSeq>)> {
    let decoded: Vec<TokenSeq> = ctc_log_probs
        .iter()
        .map(|&lp| blank_retaining_decode(&t.value(lp)))
        .collect();
    let m_batch = decoded
        .iter()
        .map(|d| Ok(t.constant(frozen_text_encoding(model, d)?)))
        .collect::<Result<Vec<_>>>()?;
    let loss = contrastive_loss(t, a_batch, &m_batch, tau, include_positive)?;
    Ok((loss, decoded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Direct scalar evaluation of the loss on a similarity matrix.
    fn printed_formula(s: &[[f64; 3]; 3], tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..3 {
            let num = (s[i][i] / tau).exp();
            let den: f64 = (0..3).filter(|&j| j != i).map(|j| (s[i][j] / tau).exp()).sum();
            total -= (num / den).ln();
        }
        total
    }

    #[test]
    fn hand_set_similarity_matrix() {
        let s = [[0.9, 0.2, -0.1], [0.3, 0.5, 0.4], [-0.2, 0.1, 0.7]];
        let t = Tape::no_grad();
        let sim = t.constant(Tensor::from_rows(&s.iter().map(|r| r.iter().map(|x| x / 0.1).collect()).collect::<Vec<_>>()).unwrap());
        let got = t.item(contrastive_from_similarity(&t, sim, false));
        assert!((got - printed_formula(&s, 0.1)).abs() < 1e-9, "{got}");
    }

    #[test]
    fn equal_similarities_give_zero() {
        let t = Tape::no_grad();
        let sim = t.constant(Tensor::full(&[2, 2], 3.7));
        assert!(t.item(contrastive_from_similarity(&t, sim, false)).abs() < 1e-12);
        // With the positive in the denominator it becomes 2 ln 2.
        let with_pos = t.item(contrastive_from_similarity(&t, sim, true));
        assert!((with_pos - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_rejected() {
        let t = Tape::no_grad();
        let a = t.constant(Tensor::full(&[3, 4], 1.0));
        assert!(matches!(contrastive_loss(&t, &[a], &[a], 0.1, false), Err(Error::BatchTooSmall(1))));
        assert!(contrastive_loss(&t, &[a, a], &[a, a], 0.0, false).is_err());
    }

    #[test]
    fn zero_pooled_vector_is_floored() {
        let t = Tape::no_grad();
        let z = t.constant(Tensor::zeros(&[3, 4]));
        let o = t.constant(Tensor::full(&[2, 4], 1.0));
        let l = t.item(contrastive_loss(&t, &[z, o], &[o, z], 0.1, false).unwrap());
        assert!(l.is_finite());
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Tensor> = (0..3).map(|i| random(3 + i, 5, &mut rng)).collect();
        let m: Vec<Tensor> = (0..3).map(|i| random(2 + i, 5, &mut rng)).collect();
        let eval = |a: &[Tensor]| {
            let t = Tape::no_grad();
            let av: Vec<Var> = a.iter().map(|x| t.constant(x.clone())).collect();
            let mv: Vec<Var> = m.iter().map(|x| t.constant(x.clone())).collect();
            t.item(contrastive_loss(&t, &av, &mv, 0.1, false).unwrap())
        };
        let base = eval(&a);
        let mut scaled = a.clone();
        scaled[1].scale_in_place(7.5);
        scaled[2].scale_in_place(0.01);
        assert!((eval(&scaled) - base).abs() < 1e-9);
    }

    #[test]
    fn lowering_positive_raises_loss() {
        let s = [[0.9, 0.2, -0.1], [0.3, 0.5, 0.4], [-0.2, 0.1, 0.7]];
        let mut prev = printed_formula(&s, 0.1);
        for step in 1..10 {
            let mut s2 = s;
            s2[1][1] -= 0.1 * step as f64;
            let now = printed_formula(&s2, 0.1);
            let t = Tape::no_grad();
            let rows: Vec<Vec<f64>> = s2.iter().map(|r| r.iter().map(|x| x / 0.1).collect()).collect();
            let sim = t.constant(Tensor::from_rows(&rows).unwrap());
            let ours = t.item(contrastive_from_similarity(&t, sim, false));
            assert!(ours > prev - 1e-12 && (ours - now).abs() < 1e-9);
            prev = ours;
        }
    }

    #[test]
    fn gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a: Vec<_> = (0..3).map(|i| store.register(format!("a{i}"), random(2 + i, 4, &mut rng))).collect();
            let m: Vec<Tensor> = (0..3).map(|_| random(3, 4, &mut rng)).collect();
            let ids = a.clone();
            for include in [false, true] {
                let err = grad_check(&mut store, &ids, 1e-6, |t, s| {
                    let av: Vec<Var> = a.iter().map(|&id| t.param(s, id)).collect();
                    let mv: Vec<Var> = m.iter().map(|x| t.constant(x.clone())).collect();
                    contrastive_loss(t, &av, &mv, 0.1, include)
                })
                .unwrap();
                assert!(err < 1e-6, "{err}");
            }
        }
    }
}

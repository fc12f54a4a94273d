use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Stand-in for a zero clipped n-gram count.
pub const SMOOTHING_EPS: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in [0, 100] with uniform weights over 1..=max_n and a
/// brevity penalty. Zero matches at some order count as `SMOOTHING_EPS`.
/// An order for which the hypotheses contain no n-grams at all (every
/// hypothesis shorter than n) is dropped from the geometric mean.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // orders with no hypothesis n-grams at all are left out of the mean
    let orders: Vec<usize> = (0..max_n).filter(|&i| total[i] > 0).collect();
    let log_p: f64 = orders
        .iter()
        .map(|&i| {
            let m = if matched[i] == 0 { SMOOTHING_EPS } else { matched[i] as f64 };
            (m / total[i] as f64).ln()
        })
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len > ref_len { 0.0 } else { 1.0 - ref_len as f64 / hyp_len as f64 };
    Ok(100.0 * (log_p + bp).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        assert!((corpus_bleu(&c, &c, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_corpus_scores_near_zero() {
        let b = corpus_bleu(&[toks("a b c d")], &[toks("e f g h")], 4).unwrap();
        assert!(b < 1e-6, "{b}");
    }

    #[test]
    fn short_hypothesis_brevity_penalty() {
        // all precisions are 1, so BLEU is exactly the brevity penalty
        let b = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")], 4).unwrap();
        assert!((b - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_partial_match() {
        // hyp "a b x d", ref "a b c d": p1 3/4, p2 1/3, p3 eps/2, p4 eps/1
        let got = corpus_bleu(&[toks("a b x d")], &[toks("a b c d")], 4).unwrap();
        let want = 100.0 * (0.75 * (1.0 / 3.0) * (SMOOTHING_EPS / 2.0) * SMOOTHING_EPS).powf(0.25);
        assert!((got - want).abs() < 1e-12);
        let bigram_only = corpus_bleu(&[toks("a b x d")], &[toks("a b c d")], 2).unwrap();
        assert!((bigram_only - 100.0 * (0.75f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn short_sentences_use_effective_order() {
        let c = vec![toks("a b"), toks("c d e")];
        assert!((corpus_bleu(&c, &c, 4).unwrap() - 100.0).abs() < 1e-9);
        // only orders 1 and 2 exist: p1 = 2/3, p2 = 1/1
        let b = corpus_bleu(&[toks("a b"), toks("c")], &[toks("a b"), toks("d")], 4).unwrap();
        assert!((b - 100.0 * (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        // "the the the" against "the cat": unigram matches clipped to 1
        let b = corpus_bleu(&[toks("the the the")], &[toks("the cat")], 1).unwrap();
        assert!((b - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<u32>> = vec![];
        assert!(matches!(corpus_bleu(&empty, &empty, 4), Err(Error::EmptyCorpus)));
        assert!(corpus_bleu(&[vec![1]], &[vec![1], vec![2]], 4).is_err());
        assert_eq!(corpus_bleu(&[vec![]], &[vec![1u32]], 4).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..6, 0..8), proptest::collection::vec(0u8..6, 1..8)),
                1..8,
            ),
            rot in 0usize..8,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let mut p = pairs.clone();
            let k = rot % p.len();
            p.rotate_left(k);
            p.reverse();
            let (h2, r2): (Vec<_>, Vec<_>) = p.into_iter().unzip();
            let a = corpus_bleu(&h, &r, 4).unwrap();
            let b = corpus_bleu(&h2, &r2, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
        }
    }
}

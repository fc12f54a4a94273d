use rand::Rng;

use crate::model::{SharedVocab, TokenId, TokenSeq};

/// `round(r * len)` with ties going up.
pub fn blank_count(len: usize, r: f64) -> usize {
    (r * len as f64 + 0.5).floor() as usize
}

/// Inserts `blank_count(|x|, r)` blanks, each into a uniformly drawn gap of
/// `x` (both ends included). Several blanks may land in the same gap.
pub fn blank_perturb<R: Rng>(x: &[TokenId], r: f64, blank: TokenId, rng: &mut R) -> TokenSeq {
    let n = blank_count(x.len(), r.max(0.0));
    let mut per_gap = vec![0usize; x.len() + 1];
    for _ in 0..n {
        per_gap[rng.random_range(0..=x.len())] += 1;
    }
    let mut out = Vec::with_capacity(x.len() + n);
    for (i, &k) in per_gap.iter().enumerate() {
        out.extend(std::iter::repeat_n(blank, k));
        if let Some(&tok) = x.get(i) {
            out.push(tok);
        }
    }
    out
}

pub fn strip_blanks(x: &[TokenId], blank: TokenId) -> TokenSeq {
    x.iter().copied().filter(|&t| t != blank).collect()
}

/// Replaces punctuation by blanks in place.
pub fn make_noisy_test(x: &[TokenId], vocab: &SharedVocab) -> TokenSeq {
    x.iter()
        .map(|&t| if vocab.is_punctuation(t) { vocab.blank } else { t })
        .collect()
}

pub fn blank_ratio(seq: &[TokenId], blank: TokenId) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    seq.iter().filter(|&&t| t == blank).count() as f64 / seq.len() as f64
}

/// Partitions by `ratio > threshold`; a ratio equal to the threshold is low.
pub fn split_by_blank_ratio<T: Clone>(samples: &[(T, f64)], threshold: f64) -> (Vec<T>, Vec<T>) {
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (s, ratio) in samples {
        if *ratio > threshold {
            high.push(s.clone());
        } else {
            low.push(s.clone());
        }
    }
    (low, high)
}

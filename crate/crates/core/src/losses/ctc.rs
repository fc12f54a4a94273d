use std::rc::Rc;

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numcore::kernels::{log_add, logsumexp};
use crate::numcore::{Tape, Tensor, Var};

/// Fewest frames that can emit `target`: one per label plus a separating
/// blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(log_probs: &Tensor, target: &[TokenId], blank: TokenId) -> Result<()> {
    if log_probs.rank() != 2 {
        return Err(Error::shape("ctc", format!("log_probs must be T x V, got {:?}", log_probs.shape())));
    }
    let v = log_probs.cols();
    if blank >= v {
        return Err(Error::OutOfVocab { id: blank, vocab: v });
    }
    if let Some(&id) = target.iter().find(|&&id| id >= v) {
        return Err(Error::OutOfVocab { id, vocab: v });
    }
    if target.contains(&blank) {
        return Err(Error::InvalidArgument("CTC target contains the blank id".into()));
    }
    let required = ctc_min_frames(target);
    if log_probs.rows() < required {
        return Err(Error::CtcInfeasible {
            frames: log_probs.rows(),
            target_len: target.len(),
            required,
        });
    }
    Ok(())
}

/// Forward-backward in log space. Returns `-log P(target)` and its gradient
/// with respect to every log-probability entry.
pub fn ctc_forward_backward(
    log_probs: &Tensor,
    target: &[TokenId],
    blank: TokenId,
) -> Result<(f64, Tensor)> {
    check_target(log_probs, target, blank)?;
    let (frames, v) = (log_probs.rows(), log_probs.cols());
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    // s may be entered from s - 2 when it is a label differing from s - 2.
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| log_probs.data()[t * v + ext[s]];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip[s] {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, s);
        }
    }

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding the emission at t itself.
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip[s + 2] {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let end = &alpha[last..last + s_len];
    let log_p = if s_len > 1 {
        log_add(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    if log_p == ninf {
        return Err(Error::CtcInfeasible {
            frames,
            target_len: target.len(),
            required: ctc_min_frames(target),
        });
    }

    let mut grad = Tensor::zeros(&[frames, v]);
    let mut occupancy = vec![ninf; v];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|x| *x = ninf);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        let row = grad.row_mut(t);
        for k in 0..v {
            if occupancy[k] != ninf {
                row[k] = -(occupancy[k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood as a tape op over `T x V` log-probabilities.
pub fn ctc_loss(t: &Tape, log_probs: Var, target: &[TokenId], blank: TokenId) -> Result<Var> {
    let (nll, grad) = ctc_forward_backward(&t.value(log_probs), target, blank)?;
    let grad = Rc::new(grad);
    Ok(t.custom(&[log_probs], Tensor::scalar(nll), move |g, _| {
        let mut out = (*grad).clone();
        out.scale_in_place(g.item());
        vec![Some(out)]
    }))
}

/// Reference CTC by enumerating every length-`T` label path.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[TokenId], blank: TokenId) -> Result<f64> {
    const LIMIT: u128 = 1 << 22;
    let (frames, v) = (log_probs.rows(), log_probs.cols());
    let space = (v as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if space > LIMIT {
        return Err(Error::SearchSpace(space));
    }
    if target.contains(&blank) {
        return Err(Error::InvalidArgument("CTC target contains the blank id".into()));
    }
    let mut path = vec![0usize; frames];
    let mut terms = Vec::new();
    for mut code in 0..space as usize {
        for p in path.iter_mut() {
            *p = code % v;
            code /= v;
        }
        if collapse(&path, blank) == target {
            terms.push(path.iter().enumerate().map(|(t, &k)| log_probs.get(t, k)).sum::<f64>());
        }
    }
    if terms.is_empty() {
        return Err(Error::CtcInfeasible {
            frames,
            target_len: target.len(),
            required: ctc_min_frames(target),
        });
    }
    Ok(-logsumexp(&terms))
}

/// Merges repeats, then drops blanks.
pub fn collapse(path: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::kernels::log_softmax_in_place;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_log_probs(frames: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut m = Tensor::matrix(frames, v, (0..frames * v).map(|_| rng.random_range(-3.0..3.0)).collect())
            .unwrap();
        for r in 0..frames {
            log_softmax_in_place(m.row_mut(r));
        }
        m
    }

    #[test]
    fn two_frames_single_label() {
        let lp = Tensor::full(&[2, 2], 0.5f64.ln());
        let nll = ctc_forward_backward(&lp, &[1], 0).unwrap().0;
        assert!((nll + 0.75f64.ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &[1], 0).unwrap() + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_log_probs(5, 4, &mut rng);
        let nll = ctc_forward_backward(&lp, &[], 0).unwrap().0;
        let expected: f64 = -(0..5).map(|t| lp.get(t, 0)).sum::<f64>();
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_bad_targets() {
        let lp = Tensor::full(&[2, 3], (1.0f64 / 3.0).ln());
        assert!(matches!(
            ctc_forward_backward(&lp, &[1, 1], 0),
            Err(Error::CtcInfeasible { required: 3, .. })
        ));
        assert!(matches!(ctc_brute_force(&lp, &[1, 2, 1], 0), Err(Error::CtcInfeasible { .. })));
        assert!(ctc_forward_backward(&lp, &[0], 0).is_err());
        assert!(ctc_forward_backward(&lp, &[5], 0).is_err());
        assert!(matches!(
            ctc_brute_force(&Tensor::zeros(&[40, 4]), &[], 0),
            Err(Error::SearchSpace(_))
        ));
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[1, 1, 0, 2], 0), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(collapse(&[1, 0, 1], 0), vec![1, 1]);
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp = random_log_probs(6, 4, &mut rng);
        let (_, g) = ctc_forward_backward(&lp, &[1, 2, 2], 0).unwrap();
        for r in 0..6 {
            assert!((g.row(r).iter().sum::<f64>() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let lp = random_log_probs(5, 3, &mut rng);
            let target = [1, 2];
            let (_, g) = ctc_forward_backward(&lp, &target, 0).unwrap();
            let eps = 1e-6;
            for i in 0..lp.len() {
                let mut hi = lp.clone();
                hi.data_mut()[i] += eps;
                let mut lo = lp.clone();
                lo.data_mut()[i] -= eps;
                let f = |m: &Tensor| ctc_forward_backward(m, &target, 0).unwrap().0;
                let num = (f(&hi) - f(&lo)) / (2.0 * eps);
                assert!((num - g.data()[i]).abs() / num.abs().max(1.0) < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            frames in 1usize..=5,
            v in 2usize..=4,
            raw in proptest::collection::vec(1usize..4, 0..=3),
            seed in any::<u64>(),
        ) {
            let target: Vec<usize> = raw.into_iter().map(|k| 1 + (k - 1) % (v - 1)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_log_probs(frames, v, &mut rng);
            match (ctc_forward_backward(&lp, &target, 0), ctc_brute_force(&lp, &target, 0)) {
                (Ok((a, _)), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(Error::CtcInfeasible { .. }), Err(Error::CtcInfeasible { .. })) => {}
                (a, b) => prop_assert!(false, "disagree: {:?} vs {:?}", a.map(|x| x.0), b),
            }
        }
    }
}

use crate::error::{Error, Result};
use crate::losses::collapse;
use crate::model::{ModelAssembly, TokenId, TokenSeq};
use crate::nn::ForwardCtx;
use crate::numcore::kernels::{argmax, log_softmax_in_place};
use crate::numcore::{Tape, Tensor};

/// Per-frame argmax. With `keep_blanks` the raw labeling is returned,
/// otherwise repeats are merged and blanks removed.
pub fn ctc_greedy_decode(log_probs: &Tensor, keep_blanks: bool, blank: TokenId) -> TokenSeq {
    let raw: TokenSeq = (0..log_probs.rows()).map(|r| argmax(log_probs.row(r))).collect();
    if keep_blanks {
        raw
    } else {
        collapse(&raw, blank)
    }
}

/// Next-token log-probabilities for a prefix that starts with bos.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Without bos and eos.
    pub tokens: TokenSeq,
    /// Summed log-probability over `length_norm(len)`, len counting eos.
    pub score: f64,
    pub log_prob: f64,
    /// Set when `max_len` was reached and no hypothesis had ended.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub bos: TokenId,
    pub eos: TokenId,
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: TokenSeq,
    log_prob: f64,
}

fn normalized(log_prob: f64, len: usize, lp: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(lp)
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: &(f64, TokenSeq), b: &(f64, TokenSeq)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

pub fn beam_search_with<S: StepScorer>(scorer: &mut S, cfg: &BeamConfig) -> Result<DecodeResult> {
    if cfg.beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut live = vec![Hyp { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<(f64, TokenSeq)> = Vec::new();
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(cfg.bos);
            prefix.extend_from_slice(&h.tokens);
            let lps = scorer.next_log_probs(&prefix)?;
            for (tok, lp) in lps.into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut toks = h.tokens.clone();
                toks.push(tok);
                cands.push((h.log_prob + lp, toks));
            }
        }
        // Candidates share a length, so raw log-probability ranks them.
        cands.sort_by(rank);
        cands.truncate(cfg.beam);
        live.clear();
        for (log_prob, tokens) in cands {
            if tokens.last() == Some(&cfg.eos) {
                finished.push(Hyp { tokens, log_prob });
            } else {
                live.push(Hyp { tokens, log_prob });
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let truncated = finished.is_empty();
    let pool = if truncated { live } else { finished };
    let best = pool
        .into_iter()
        .map(|h| {
            let s = normalized(h.log_prob, h.tokens.len(), cfg.length_penalty);
            (s, h)
        })
        .min_by(|a, b| rank(&(a.0, a.1.tokens.clone()), &(b.0, b.1.tokens.clone())))
        .ok_or_else(|| Error::InvalidArgument("scorer assigned -inf to every token".into()))?;
    let (score, mut hyp) = best;
    if hyp.tokens.last() == Some(&cfg.eos) {
        hyp.tokens.pop();
    }
    Ok(DecodeResult { tokens: hyp.tokens, score, log_prob: hyp.log_prob, truncated })
}

/// Plain argmax decoding against the same scorer.
pub fn greedy_with<S: StepScorer>(scorer: &mut S, cfg: &BeamConfig) -> Result<DecodeResult> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prefix = vec![cfg.bos];
    for _ in 0..cfg.max_len {
        let lps = scorer.next_log_probs(&prefix)?;
        let tok = argmax(&lps);
        log_prob += lps[tok];
        tokens.push(tok);
        prefix.push(tok);
        if tok == cfg.eos {
            let score = normalized(log_prob, tokens.len(), cfg.length_penalty);
            tokens.pop();
            return Ok(DecodeResult { tokens, score, log_prob, truncated: false });
        }
    }
    let score = normalized(log_prob, tokens.len(), cfg.length_penalty);
    Ok(DecodeResult { tokens, score, log_prob, truncated: true })
}

/// Decoder over a fixed encoder memory, re-run on the whole prefix each step.
pub struct ModelScorer<'a> {
    model: &'a ModelAssembly,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ModelAssembly, memory: Tensor) -> Self {
        ModelScorer { model, memory }
    }

    /// Memory is `A(s)` from the speech path in eval mode.
    pub fn for_speech(model: &'a ModelAssembly, speech: &Tensor) -> Result<Self> {
        let t = Tape::no_grad();
        let path = model.st_encode(&t, speech, &mut ForwardCtx::eval())?;
        let memory = (*t.value(path.encoded)).clone();
        Ok(ModelScorer { model, memory })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let t = Tape::no_grad();
        let mem = t.constant(self.memory.clone());
        let out = self.model.decoder_forward(&t, mem, prefix, &mut ForwardCtx::eval())?;
        let logits = t.value(out.logits);
        let mut row = logits.row(logits.rows() - 1).to_vec();
        log_softmax_in_place(&mut row);
        Ok(row)
    }
}

/// Log-probabilities looked up by the last prefix token: a first-order
/// toy decoder with hand-set tables.
pub struct TableScorer(pub Vec<Vec<f64>>);

impl StepScorer for TableScorer {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let last = *prefix.last().ok_or_else(|| Error::InvalidArgument("empty prefix".into()))?;
        self.0
            .get(last)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no table row for token {last}")))
    }
}

impl BeamConfig {
    pub fn for_model(model: &ModelAssembly, beam: usize, length_penalty: f64, max_len: usize) -> Self {
        BeamConfig {
            bos: model.vocab.bos,
            eos: model.vocab.eos,
            beam,
            length_penalty,
            max_len,
        }
    }
}

pub fn beam_search(
    model: &ModelAssembly,
    speech: &Tensor,
    beam: usize,
    length_penalty: f64,
    max_len: usize,
) -> Result<DecodeResult> {
    let mut scorer = ModelScorer::for_speech(model, speech)?;
    beam_search_with(&mut scorer, &BeamConfig::for_model(model, beam, length_penalty, max_len))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::LayerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lns(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    /// eos=0, a=1, b=2, bos=3. Greedy takes `a` (0.55) and ends with
    /// `a eos` (0.22); `b eos` has 0.36.
    pub(crate) fn counterexample() -> (TableScorer, BeamConfig) {
        let table = vec![
            lns(&[1.0, 1e-300, 1e-300]),
            lns(&[0.4, 0.3, 0.3]),
            lns(&[0.9, 0.05, 0.05]),
            lns(&[0.05, 0.55, 0.4]),
        ];
        let cfg = BeamConfig { bos: 3, eos: 0, beam: 2, length_penalty: 1.0, max_len: 2 };
        (TableScorer(table), cfg)
    }

    /// Best eos-terminated sequence of length <= max_len by enumeration.
    pub(crate) fn enumerate_best(scorer: &mut TableScorer, cfg: &BeamConfig) -> (TokenSeq, f64) {
        let v = scorer.0[0].len();
        let mut best: Option<(f64, TokenSeq)> = None;
        let mut stack: Vec<(TokenSeq, f64)> = vec![(vec![], 0.0)];
        while let Some((toks, lp)) = stack.pop() {
            if toks.len() == cfg.max_len {
                continue;
            }
            let mut prefix = vec![cfg.bos];
            prefix.extend(&toks);
            let lps = scorer.next_log_probs(&prefix).unwrap();
            for tok in 0..v {
                let mut next = toks.clone();
                next.push(tok);
                let l = lp + lps[tok];
                if tok == cfg.eos {
                    let s = l / (next.len() as f64).powf(cfg.length_penalty);
                    if best.as_ref().is_none_or(|b| s > b.0) {
                        best = Some((s, next));
                    }
                } else {
                    stack.push((next, l));
                }
            }
        }
        let (s, mut t) = best.unwrap();
        t.pop();
        (t, s)
    }

    #[test]
    fn ctc_examples() {
        let blank = 3;
        let lp = |labels: &[usize]| {
            let rows: Vec<Vec<f64>> = labels
                .iter()
                .map(|&l| (0..5).map(|k| if k == l { -0.1 } else { -3.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let x = lp(&[1, 1, blank, 2]);
        assert_eq!(ctc_greedy_decode(&x, false, blank), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&x, true, blank), vec![1, 1, blank, 2]);
        assert!(ctc_greedy_decode(&lp(&[blank, blank]), false, blank).is_empty());
        assert_eq!(ctc_greedy_decode(&lp(&[1, blank, 1]), false, blank), vec![1, 1]);
    }

    #[test]
    fn beam_two_beats_greedy_on_counterexample() {
        let (mut sc, cfg) = counterexample();
        let greedy = greedy_with(&mut sc, &cfg).unwrap();
        assert_eq!(greedy.tokens, vec![1]);
        assert!((greedy.log_prob - 0.22f64.ln()).abs() < 1e-12);
        let beam = beam_search_with(&mut sc, &cfg).unwrap();
        let (oracle, oracle_score) = enumerate_best(&mut sc, &cfg);
        assert_eq!(beam.tokens, vec![2]);
        assert_eq!(beam.tokens, oracle);
        assert!((beam.score - oracle_score).abs() < 1e-12);
        assert!((beam.score - 0.36f64.ln() / 2.0).abs() < 1e-12);
        assert!(!beam.truncated);
    }

    #[test]
    fn beam_one_is_greedy_on_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v = rng.random_range(3..7);
            let table: Vec<Vec<f64>> = (0..=v)
                .map(|_| {
                    let mut r: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
                    log_softmax_in_place(&mut r);
                    r
                })
                .collect();
            let cfg = BeamConfig { bos: v, eos: 0, beam: 1, length_penalty: 1.0, max_len: 6 };
            let mut sc = TableScorer(table);
            assert_eq!(beam_search_with(&mut sc, &cfg).unwrap(), greedy_with(&mut sc, &cfg).unwrap());
        }
    }

    #[test]
    fn truncation_is_flagged() {
        // eos never wins and is never reached within two steps
        let table = vec![lns(&[0.1, 0.9]), lns(&[1e-300, 1.0]), lns(&[0.1, 0.9])];
        let cfg = BeamConfig { bos: 2, eos: 0, beam: 1, length_penalty: 1.0, max_len: 2 };
        let r = beam_search_with(&mut TableScorer(table), &cfg).unwrap();
        assert!(r.truncated);
        assert_eq!(r.tokens, vec![1, 1]);
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let mut table = vec![lns(&[0.5, 0.25, 0.25]); 4];
        table[3] = lns(&[1e-300, 0.5, 0.5]);
        let cfg = BeamConfig { bos: 3, eos: 0, beam: 3, length_penalty: 0.0, max_len: 3 };
        let r = beam_search_with(&mut TableScorer(table.clone()), &cfg).unwrap();
        assert_eq!(r.tokens, vec![1]);
        assert!(beam_search_with(&mut TableScorer(table), &BeamConfig { beam: 0, ..cfg }).is_err());
    }

    #[test]
    fn model_beam_one_is_greedy() {
        let cfg = ModelConfig {
            vocab_size: 10,
            feature_dim: 3,
            layer: LayerConfig { model_dim: 8, heads: 2, ffn_dim: 16, dropout: 0.1 },
            conv_layers: 1,
            speech_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..10 {
            let model = ModelAssembly::new(cfg.clone(), seed).unwrap();
            let frames = rng.random_range(2..9);
            let s = Tensor::matrix(frames, 3, (0..frames * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let bc = BeamConfig::for_model(&model, 1, 1.0, 5);
            let mut sc = ModelScorer::for_speech(&model, &s).unwrap();
            let a = beam_search_with(&mut sc, &bc).unwrap();
            let b = greedy_with(&mut sc, &bc).unwrap();
            assert_eq!(a, b);
        }
    }
}

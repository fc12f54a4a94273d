use std::path::Path;

use super::bleu::corpus_bleu;
use super::decode::{beam_search_with, BeamConfig, ModelScorer};
use crate::data::{blank_ratio, Quadruple, TargetMapping};
use crate::error::{Error, Result};
use crate::losses::{blank_retaining_decode, teacher_forcing};
use crate::model::{ModelAssembly, TokenId, TokenSeq};
use crate::nn::{AttentionWeights, ForwardCtx};
use crate::numcore::kernels::cosine;
use crate::numcore::{Tape, Tensor};

/// Mean over heads and kept query rows of `-sum_j w_ij ln w_ij`.
///
/// `query_mask[i] == false` drops row `i`. Zero weights contribute zero.
pub fn attention_entropy(weights: &AttentionWeights, query_mask: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for h in &weights.heads {
        for i in 0..h.rows() {
            if query_mask.is_some_and(|m| !m[i]) {
                continue;
            }
            total += h.row(i).iter().filter(|&&w| w > 0.0).map(|&w| -w * w.ln()).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Per-head entropies, same averaging over rows.
pub fn head_entropies(weights: &AttentionWeights) -> Vec<f64> {
    weights
        .heads
        .iter()
        .map(|h| attention_entropy(&AttentionWeights { heads: vec![h.clone()] }, None))
        .collect()
}

/// Similarity of one probe token. `None` means no frame was labeled with it.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub token: TokenId,
    pub frames: usize,
    pub cross_modal: Option<f64>,
    pub cross_lingual: Option<f64>,
}

/// Frame-pooled alignment-adapter outputs per token, accumulated over
/// samples. Frames go to their CTC argmax label.
#[derive(Clone, Debug)]
pub struct ProbeAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ProbeAccumulator {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        ProbeAccumulator { sums: vec![vec![0.0; dim]; vocab_size], counts: vec![0; vocab_size] }
    }

    pub fn add(&mut self, hidden: &Tensor, labels: &[TokenId]) {
        for (r, &l) in labels.iter().enumerate() {
            for (s, x) in self.sums[l].iter_mut().zip(hidden.row(r)) {
                *s += x;
            }
            self.counts[l] += 1;
        }
    }

    pub fn rows(&self, model: &ModelAssembly, mapping: &TargetMapping, probes: &[TokenId]) -> Result<Vec<ProbeRow>> {
        let e = model.store.value(model.shared_embedding);
        probes
            .iter()
            .map(|&tok| {
                model.vocab.check(&[tok])?;
                let n = self.counts[tok];
                if n == 0 {
                    return Ok(ProbeRow { token: tok, frames: 0, cross_modal: None, cross_lingual: None });
                }
                let mean: Vec<f64> = self.sums[tok].iter().map(|s| s / n as f64).collect();
                Ok(ProbeRow {
                    token: tok,
                    frames: n,
                    cross_modal: Some(cosine(&mean, e.row(tok))),
                    cross_lingual: mapping.map_token(tok).map(|m| cosine(&mean, e.row(m))),
                })
            })
            .collect()
    }
}

/// Alignment-adapter hidden states and CTC log-probabilities, eval mode.
fn alignment(model: &ModelAssembly, speech: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = Tape::no_grad();
    let out = model.alignment_adapter_forward(
        &t,
        model.speech_encoder_forward(&t, speech, &mut ForwardCtx::eval())?,
        &mut ForwardCtx::eval(),
    )?;
    Ok(((*t.value(out.hidden)).clone(), (*t.value(out.ctc_log_probs)).clone()))
}

/// Cross-modal and cross-lingual cosines for `probes` over one utterance.
pub fn crossmodal_similarity(
    model: &ModelAssembly,
    mapping: &TargetMapping,
    speech: &Tensor,
    probes: &[TokenId],
) -> Result<Vec<ProbeRow>> {
    let mut acc = ProbeAccumulator::new(model.vocab.size, model.model_dim());
    let (hidden, lps) = alignment(model, speech)?;
    acc.add(&hidden, &blank_retaining_decode(&lps));
    acc.rows(model, mapping, probes)
}

/// Mean cross-modal cosine over present probes; `None` if all are absent.
pub fn mean_cross_modal(rows: &[ProbeRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.cross_modal).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    /// Textual-adapter self-attention.
    pub self_attention_entropy: f64,
    pub self_attention_heads: Vec<f64>,
    /// Decoder cross-attention, teacher-forced on the reference.
    pub cross_attention_entropy: f64,
    pub cross_attention_heads: Vec<f64>,
    pub probes: Vec<ProbeRow>,
    /// Mean blank share of the blank-retaining decode.
    pub blank_ratio: f64,
    /// Per-sample blank share, same order as the input.
    pub sample_blank_ratios: Vec<f64>,
}

/// Entropy, similarity and blank-ratio probes over `samples`. All content
/// tokens are probed.
pub fn analysis_report(model: &ModelAssembly, mapping: &TargetMapping, samples: &[Quadruple]) -> Result<AnalysisReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let heads = model.config.layer.heads;
    let mut self_heads = vec![0.0; heads];
    let mut cross_heads = vec![0.0; heads];
    let mut acc = ProbeAccumulator::new(model.vocab.size, model.model_dim());
    let mut ratios = Vec::with_capacity(samples.len());
    for q in samples {
        let t = Tape::no_grad();
        let mut ctx = ForwardCtx::eval();
        let path = model.st_encode(&t, &q.s, &mut ctx)?;
        for (a, e) in self_heads.iter_mut().zip(head_entropies(&path.adapter_attention)) {
            *a += e;
        }
        let (input, _) = teacher_forcing(model, &q.y);
        let dec = model.decoder_forward(&t, path.encoded, &input, &mut ctx)?;
        for layer in &dec.cross_attention {
            for (a, e) in cross_heads.iter_mut().zip(head_entropies(layer)) {
                *a += e / dec.cross_attention.len() as f64;
            }
        }
        let lps = t.value(path.alignment.ctc_log_probs);
        let labels = blank_retaining_decode(&lps);
        ratios.push(blank_ratio(&labels, model.vocab.blank));
        acc.add(&t.value(path.alignment.hidden), &labels);
    }
    let n = samples.len() as f64;
    self_heads.iter_mut().for_each(|x| *x /= n);
    cross_heads.iter_mut().for_each(|x| *x /= n);
    let probes: Vec<TokenId> = model.vocab.content().collect();
    Ok(AnalysisReport {
        self_attention_entropy: self_heads.iter().sum::<f64>() / heads as f64,
        self_attention_heads: self_heads,
        cross_attention_entropy: cross_heads.iter().sum::<f64>() / heads as f64,
        cross_attention_heads: cross_heads,
        probes: acc.rows(model, mapping, &probes)?,
        blank_ratio: ratios.iter().sum::<f64>() / n,
        sample_blank_ratios: ratios,
    })
}

/// BLEU of the `blank ratio <= threshold` and `> threshold` groups.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSplit {
    pub low_count: usize,
    pub high_count: usize,
    pub low_bleu: Option<f64>,
    pub high_bleu: Option<f64>,
    pub overall_bleu: f64,
}

pub fn noise_split_bleu(
    hyps: &[TokenSeq],
    refs: &[TokenSeq],
    ratios: &[f64],
    threshold: f64,
) -> Result<NoiseSplit> {
    let tagged: Vec<((TokenSeq, TokenSeq), f64)> = hyps
        .iter()
        .cloned()
        .zip(refs.iter().cloned())
        .zip(ratios.iter().copied())
        .collect();
    let (low, high) = crate::data::split_by_blank_ratio(&tagged, threshold);
    let group = |g: &[(TokenSeq, TokenSeq)]| -> Result<Option<f64>> {
        if g.is_empty() {
            return Ok(None);
        }
        let (h, r): (Vec<_>, Vec<_>) = g.iter().cloned().unzip();
        corpus_bleu(&h, &r, 4).map(Some)
    };
    Ok(NoiseSplit {
        low_count: low.len(),
        high_count: high.len(),
        low_bleu: group(&low)?,
        high_bleu: group(&high)?,
        overall_bleu: corpus_bleu(hyps, refs, 4)?,
    })
}

pub fn decode_all(model: &ModelAssembly, samples: &[Quadruple], beam: &BeamConfig) -> Result<Vec<TokenSeq>> {
    samples
        .iter()
        .map(|q| {
            let mut sc = ModelScorer::for_speech(model, &q.s)?;
            Ok(beam_search_with(&mut sc, beam)?.tokens)
        })
        .collect()
}

/// One `probe,metric,value` line; `None` is written as `absent`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRow {
    pub probe: String,
    pub metric: String,
    pub value: Option<f64>,
}

impl AnalysisRow {
    fn new(probe: impl Into<String>, metric: impl Into<String>, value: Option<f64>) -> Self {
        AnalysisRow { probe: probe.into(), metric: metric.into(), value }
    }
}

pub fn report_rows(report: &AnalysisReport, split: &NoiseSplit) -> Vec<AnalysisRow> {
    let mut rows = vec![AnalysisRow::new("textual_adapter", "entropy", Some(report.self_attention_entropy))];
    for (h, e) in report.self_attention_heads.iter().enumerate() {
        rows.push(AnalysisRow::new("textual_adapter", format!("entropy_head{h}"), Some(*e)));
    }
    rows.push(AnalysisRow::new("decoder_cross", "entropy", Some(report.cross_attention_entropy)));
    for (h, e) in report.cross_attention_heads.iter().enumerate() {
        rows.push(AnalysisRow::new("decoder_cross", format!("entropy_head{h}"), Some(*e)));
    }
    for p in &report.probes {
        let name = format!("token{}", p.token);
        rows.push(AnalysisRow::new(&name, "frames", Some(p.frames as f64)));
        rows.push(AnalysisRow::new(&name, "cross_modal", p.cross_modal));
        rows.push(AnalysisRow::new(&name, "cross_lingual", p.cross_lingual));
    }
    rows.push(AnalysisRow::new("all_tokens", "mean_cross_modal", mean_cross_modal(&report.probes)));
    rows.push(AnalysisRow::new("alignment", "blank_ratio", Some(report.blank_ratio)));
    rows.push(AnalysisRow::new("noise_low", "count", Some(split.low_count as f64)));
    rows.push(AnalysisRow::new("noise_low", "bleu", split.low_bleu));
    rows.push(AnalysisRow::new("noise_high", "count", Some(split.high_count as f64)));
    rows.push(AnalysisRow::new("noise_high", "bleu", split.high_bleu));
    rows.push(AnalysisRow::new("overall", "bleu", Some(split.overall_bleu)));
    rows
}

pub fn write_rows(path: &Path, rows: &[AnalysisRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["probe", "metric", "value"]).map_err(io)?;
    for r in rows {
        let v = r.value.map_or_else(|| "absent".to_string(), |x| x.to_string());
        w.write_record([r.probe.as_str(), r.metric.as_str(), v.as_str()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, SplitSizes, SyntheticTaskSpec};
    use crate::model::ModelConfig;
    use crate::nn::LayerConfig;
    use proptest::prelude::*;

    fn weights(rows: Vec<Vec<f64>>) -> AttentionWeights {
        AttentionWeights { heads: vec![Tensor::from_rows(&rows).unwrap()] }
    }

    #[test]
    fn entropy_examples() {
        let k = 5;
        let u = weights(vec![vec![1.0 / k as f64; k]; 3]);
        assert!((attention_entropy(&u, None) - (k as f64).ln()).abs() < 1e-12);
        let one_hot = weights(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(attention_entropy(&one_hot, None), 0.0);
        let mixed = weights(vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]]);
        assert!((attention_entropy(&mixed, Some(&[true, false])) - 2f64.ln()).abs() < 1e-12);
        assert!((attention_entropy(&mixed, None) - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_keys(raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 1..5), keys in 1usize..6) {
            let rows: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| {
                    let mut r: Vec<f64> = r[..keys].iter().map(|x| x + 1e-6).collect();
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|x| *x /= s);
                    r.resize(6, 0.0);
                    r
                })
                .collect();
            let e = attention_entropy(&weights(rows), None);
            prop_assert!(e >= 0.0);
            prop_assert!(e <= (keys as f64).ln() + 1e-12);
        }
    }

    fn tiny() -> (ModelAssembly, TargetMapping, Vec<Quadruple>) {
        let spec = SyntheticTaskSpec {
            vocab_size: 12,
            feature_dim: 4,
            min_len: 2,
            max_len: 3,
            kmin: 4,
            kmax: 5,
            sizes: SplitSizes { mt_train: 4, asr_train: 4, st_train: 4, dev: 3, test: 3 },
            ..SyntheticTaskSpec::default()
        };
        let corpus = gen_corpus(&spec, 3).unwrap();
        let cfg = ModelConfig {
            vocab_size: 12,
            feature_dim: 4,
            layer: LayerConfig { model_dim: 8, heads: 2, ffn_dim: 16, dropout: 0.1 },
            conv_layers: 1,
            speech_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
        };
        (ModelAssembly::new(cfg, 0).unwrap(), spec.target_mapping().unwrap(), corpus.dev)
    }

    #[test]
    fn probes_follow_argmax_labels() {
        let (model, mapping, dev) = tiny();
        let (hidden, lps) = alignment(&model, &dev[0].s).unwrap();
        let labels = blank_retaining_decode(&lps);
        let all: Vec<TokenId> = (0..12).collect();
        let rows = crossmodal_similarity(&model, &mapping, &dev[0].s, &all).unwrap();
        let e = model.store.value(model.shared_embedding);
        for r in &rows {
            let frames: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == r.token).collect();
            assert_eq!(r.frames, frames.len());
            if frames.is_empty() {
                assert_eq!(r.cross_modal, None);
                continue;
            }
            let mut mean = vec![0.0; 8];
            for &f in &frames {
                for (m, x) in mean.iter_mut().zip(hidden.row(f)) {
                    *m += x / frames.len() as f64;
                }
            }
            assert!((r.cross_modal.unwrap() - cosine(&mean, e.row(r.token))).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&r.cross_modal.unwrap()));
        }
        assert!(rows.iter().any(|r| r.cross_modal.is_none()));
    }

    #[test]
    fn report_and_csv() {
        let (model, mapping, dev) = tiny();
        let rep = analysis_report(&model, &mapping, &dev).unwrap();
        assert!(rep.self_attention_entropy >= 0.0 && rep.cross_attention_entropy >= 0.0);
        assert_eq!(rep.sample_blank_ratios.len(), dev.len());
        let refs: Vec<TokenSeq> = dev.iter().map(|q| q.y.clone()).collect();
        let split = noise_split_bleu(&refs, &refs, &[0.1, 0.5, 0.3], 0.3).unwrap();
        assert_eq!((split.low_count, split.high_count), (2, 1));
        assert!((split.overall_bleu - 100.0).abs() < 1e-9);
        let rows = report_rows(&rep, &split);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_rows(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("probe,metric,value\n"));
        assert!(text.contains("noise_high,count,1\n"));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }
}

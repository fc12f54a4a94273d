//! Training objectives: CTC, the in-batch contrastive loss and its
//! self-distilled variant, the composite ASR loss, the denoising MT loss, and
//! label-smoothed cross-entropy.

mod contrastive;
mod ctc;

pub use contrastive::{
    blank_retaining_decode, contrastive_from_similarity, contrastive_loss, frozen_text_encoding,
    kd_contrastive_loss, pooled_similarity, NORM_FLOOR,
};
pub use ctc::{collapse, ctc_brute_force, ctc_forward_backward, ctc_loss, ctc_min_frames};

use std::rc::Rc;

use rand::Rng;

use crate::data::blank_perturb;
use crate::error::{Error, Result};
use crate::model::{ModelAssembly, SpeechPath, TokenId, TokenSeq};
use crate::nn::ForwardCtx;
use crate::numcore::{Tape, Tensor, Var};

/// Stepwise decay of the weight between the two contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub initial: f64,
    pub decrement: f64,
    pub interval_steps: u64,
    pub floor: f64,
}

impl BetaSchedule {
    pub const FULL_SCALE_INTERVAL: u64 = 5000;

    pub fn with_interval(interval_steps: u64) -> Self {
        BetaSchedule {
            interval_steps,
            ..Self::default()
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        beta_at(step, self)
    }
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule {
            initial: 1.0,
            decrement: 0.1,
            interval_steps: Self::FULL_SCALE_INTERVAL,
            floor: 0.0,
        }
    }
}

pub fn beta_at(step: u64, schedule: &BetaSchedule) -> f64 {
    let k = step / schedule.interval_steps.max(1);
    (schedule.initial - schedule.decrement * k as f64).max(schedule.floor)
}

/// Scalar values of one ASR batch and the coefficients that combined them.
///
/// `alpha` and `beta` are the effective values: ablations that disable a
/// contrastive term fold that into them, so `total` always recomposes as
/// `ctc + alpha * (beta * cl + (1 - beta) * cl_kd)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub cl: f64,
    pub cl_kd: f64,
    pub total: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn recompose(&self) -> f64 {
        self.ctc + self.alpha * (self.beta * self.cl + (1.0 - self.beta) * self.cl_kd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsrLossConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Scheduled value for this step.
    pub beta: f64,
    pub use_cl: bool,
    pub use_kd: bool,
    /// Put the positive pair in the denominator too.
    pub include_positive: bool,
}

impl Default for AsrLossConfig {
    fn default() -> Self {
        AsrLossConfig {
            tau: 0.1,
            alpha: 0.3,
            beta: 1.0,
            use_cl: true,
            use_kd: true,
            include_positive: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AsrSample<'a> {
    pub speech: &'a Tensor,
    pub transcript: &'a [TokenId],
}

pub struct AsrLossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub paths: Vec<SpeechPath>,
    /// Blank-retaining decodes used by the distilled term (empty when off).
    pub decoded: Vec<TokenSeq>,
    pub ctc_skipped: usize,
}

/// CTC on the alignment adapter plus the two contrastive terms against the
/// frozen text encoder, all summed over the batch.
pub fn asr_loss(
    t: &Tape,
    model: &ModelAssembly,
    batch: &[AsrSample<'_>],
    cfg: &AsrLossConfig,
    ctx: &mut ForwardCtx,
) -> Result<AsrLossOutput> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let blank = model.vocab.blank;
    let mut paths = Vec::with_capacity(batch.len());
    let mut ctc_terms = Vec::new();
    let mut ctc_skipped = 0;
    for sample in batch {
        model.vocab.check(sample.transcript)?;
        let path = model.st_encode(t, sample.speech, ctx)?;
        match ctc_loss(t, path.alignment.ctc_log_probs, sample.transcript, blank) {
            Ok(l) => ctc_terms.push(l),
            Err(Error::CtcInfeasible { frames, target_len, required }) => {
                log::warn!("skipping CTC for sample: {frames} frames, {target_len} labels, need {required}");
                ctc_skipped += 1;
            }
            Err(e) => return Err(e),
        }
        paths.push(path);
    }
    let zero = || t.constant(Tensor::scalar(0.0));
    let ctc = if ctc_terms.is_empty() { zero() } else { t.add_n(&ctc_terms) };

    let a_batch: Vec<Var> = paths.iter().map(|p| p.encoded).collect();
    let cl = if cfg.use_cl {
        let m_batch = batch
            .iter()
            .map(|s| Ok(t.constant(frozen_text_encoding(model, s.transcript)?)))
            .collect::<Result<Vec<_>>>()?;
        contrastive_loss(t, &a_batch, &m_batch, cfg.tau, cfg.include_positive)?
    } else {
        zero()
    };
    let (cl_kd, decoded) = if cfg.use_kd {
        let lps: Vec<Var> = paths.iter().map(|p| p.alignment.ctc_log_probs).collect();
        kd_contrastive_loss(t, model, &a_batch, &lps, cfg.tau, cfg.include_positive)?
    } else {
        (zero(), Vec::new())
    };

    let (alpha, beta) = match (cfg.use_cl, cfg.use_kd) {
        (true, true) => (cfg.alpha, cfg.beta),
        (true, false) => (cfg.alpha, 1.0),
        (false, true) => (cfg.alpha, 0.0),
        (false, false) => (0.0, cfg.beta),
    };
    let mix = t.add(t.scale(cl, beta), t.scale(cl_kd, 1.0 - beta));
    let total = t.add(ctc, t.scale(mix, alpha));
    let breakdown = LossBreakdown {
        ctc: t.item(ctc),
        cl: t.item(cl),
        cl_kd: t.item(cl_kd),
        total: t.item(total),
        tau: cfg.tau,
        alpha,
        beta,
    };
    Ok(AsrLossOutput {
        total,
        breakdown,
        paths,
        decoded,
        ctc_skipped,
    })
}

/// Decoder input and output for teacher forcing: `[bos] + y` and `y + [eos]`.
pub fn teacher_forcing(model: &ModelAssembly, y: &[TokenId]) -> (TokenSeq, TokenSeq) {
    let mut prefix = Vec::with_capacity(y.len() + 1);
    prefix.push(model.vocab.bos);
    prefix.extend_from_slice(y);
    let mut target = y.to_vec();
    target.push(model.vocab.eos);
    (prefix, target)
}

/// Summed token NLL of `y` given encoder memory.
pub fn sequence_nll(
    t: &Tape,
    model: &ModelAssembly,
    memory: Var,
    y: &[TokenId],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (prefix, target) = teacher_forcing(model, y);
    let logits = model.decoder_forward(t, memory, &prefix, ctx)?.logits;
    let lp = t.log_softmax_rows(logits);
    let idx: Vec<(usize, usize)> = target.iter().copied().enumerate().collect();
    Ok(t.scale(t.sum(t.pick(lp, &idx)), -1.0))
}

pub struct MtLossOutput {
    pub clean_nll: Var,
    pub noisy_nll: Option<Var>,
    pub total: Var,
    pub noisy_input: Option<TokenSeq>,
}

/// NLL of `y` from clean `x` plus, when `denoise` is set, NLL of `y` from
/// `x` with `round(r |x|)` blanks inserted.
pub fn mt_denoising_loss<R: Rng>(
    t: &Tape,
    model: &ModelAssembly,
    x: &[TokenId],
    y: &[TokenId],
    r: f64,
    denoise: bool,
    rng: &mut R,
    ctx: &mut ForwardCtx,
) -> Result<MtLossOutput> {
    if x.contains(&model.vocab.blank) {
        return Err(Error::InvalidArgument("MT source already contains blanks".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("MT target is empty".into()));
    }
    let enc = model.text_encoder_forward(t, x, ctx)?.output;
    let clean_nll = sequence_nll(t, model, enc, y, ctx)?;
    if !denoise {
        return Ok(MtLossOutput {
            clean_nll,
            noisy_nll: None,
            total: clean_nll,
            noisy_input: None,
        });
    }
    let noisy = blank_perturb(x, r, model.vocab.blank, rng);
    let enc = model.text_encoder_forward(t, &noisy, ctx)?.output;
    let noisy_nll = sequence_nll(t, model, enc, y, ctx)?;
    Ok(MtLossOutput {
        clean_nll,
        noisy_nll: Some(noisy_nll),
        total: t.add(clean_nll, noisy_nll),
        noisy_input: Some(noisy),
    })
}

/// Mean over non-pad positions of the cross-entropy against
/// `(1 - epsilon) * onehot + epsilon / K`, K being the number of classes
/// with a finite logit in that row.
pub fn label_smoothed_ce(
    t: &Tape,
    logits: Var,
    target: &[TokenId],
    epsilon: f64,
    pad: TokenId,
) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("label smoothing {epsilon} not in [0, 1)")));
    }
    let shape = t.shape(logits);
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(Error::shape(
            "label_smoothed_ce",
            format!("logits {shape:?} vs {} targets", target.len()),
        ));
    }
    if let Some(&id) = target.iter().find(|&&id| id >= shape[1]) {
        return Err(Error::OutOfVocab { id, vocab: shape[1] });
    }
    let keep: Vec<usize> = (0..target.len()).filter(|&i| target[i] != pad).collect();
    if keep.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let lp = t.log_softmax_rows(logits);
    let idx: Vec<(usize, usize)> = keep.iter().map(|&i| (i, target[i])).collect();
    let nll = t.sum(t.pick(lp, &idx));
    let mut loss = t.scale(nll, -(1.0 - epsilon));
    if epsilon > 0.0 {
        let lpv = t.value(lp);
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        for &i in &keep {
            let open: Vec<usize> = (0..shape[1]).filter(|&c| lpv.get(i, c).is_finite()).collect();
            for &c in &open {
                cells.push((i, c));
                weights.push(epsilon / open.len() as f64);
            }
        }
        let smooth = t.mul_const(t.pick(lp, &cells), Rc::new(Tensor::vector(weights)));
        loss = t.sub(loss, t.sum(smooth));
    }
    Ok(t.scale(loss, 1.0 / keep.len() as f64))
}

/// Label-smoothed CE of `y` through the full speech path.
pub fn st_loss(
    t: &Tape,
    model: &ModelAssembly,
    speech: &Tensor,
    y: &[TokenId],
    epsilon: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let memory = model.st_encode(t, speech, ctx)?.encoded;
    let (prefix, target) = teacher_forcing(model, y);
    let logits = model.decoder_forward(t, memory, &prefix, ctx)?.logits;
    label_smoothed_ce(t, logits, &target, epsilon, model.vocab.pad)
}

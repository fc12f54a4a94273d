use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{average_checkpoints, Checkpoint};
use super::config::PipelineConfig;
use super::metrics::MetricsLog;
use crate::data::{make_noisy_test, AsrPair, Batcher, CorpusSplit, MtPair, StPair};
use crate::error::{Error, Result};
use crate::losses::{
    asr_loss, frozen_text_encoding, label_smoothed_ce, mt_denoising_loss, sequence_nll,
    teacher_forcing, AsrLossConfig, AsrSample,
};
use crate::model::{freeze_for_phase, ModelAssembly, Phase};
use crate::nn::ForwardCtx;
use crate::numcore::kernels::cosine;
use crate::numcore::{Adam, Tape, Tensor, Var};

/// Called after every optimizer step with the phase-local step count.
pub type StepHook<'a> = dyn FnMut(Phase, u64, &ModelAssembly) + 'a;

pub struct PhaseOutcome {
    pub phase: Phase,
    /// Parameters after the last optimizer step.
    pub model: ModelAssembly,
    /// One per epoch.
    pub checkpoints: Vec<Checkpoint>,
    pub steps: u64,
    pub epochs: usize,
    pub best_dev: f64,
    pub metrics: MetricsLog,
}

impl PhaseOutcome {
    pub fn last_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("every phase runs at least one epoch")
    }

    /// Mean of the last `k` epoch checkpoints.
    pub fn averaged(&self, k: usize) -> Result<Checkpoint> {
        let n = self.checkpoints.len();
        average_checkpoints(&self.checkpoints[n.saturating_sub(k.max(1))..])
    }
}

/// Optional side effects of a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Epoch checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    pub hook: Option<Box<StepHook<'a>>>,
}

impl RunOptions<'_> {
    fn after_step(&mut self, phase: Phase, step: u64, model: &ModelAssembly) {
        if let Some(h) = self.hook.as_mut() {
            h(phase, step, model);
        }
    }
}

fn sub_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base ^ 0x5851_F42D_4C95_7F2D, |acc, &t| {
        let mut z = acc.wrapping_add(t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

fn non_empty<T>(set: &[T], what: &str) -> Result<()> {
    if set.is_empty() {
        log::error!("{what} split is empty");
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

pub fn model_from_checkpoint(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<ModelAssembly> {
    let mut model = ModelAssembly::new(cfg.model_config(), cfg.seed)?;
    model.store.load_values(&ckpt.params)?;
    Ok(model)
}

fn snapshot(model: &ModelAssembly, phase: Phase, step: u64, cfg: &PipelineConfig, adam: &Adam) -> Checkpoint {
    Checkpoint {
        phase,
        step,
        fingerprint: cfg.fingerprint(),
        params: model.store.to_named(),
        adam: Some(adam.state.clone()),
    }
}

/// Patience-based stopping on a dev metric that should decrease.
struct EarlyStop {
    best: f64,
    bad: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStop {
    fn new(cfg: &PipelineConfig) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            bad: 0,
            patience: cfg.early_stop_patience,
            min_delta: cfg.min_delta,
        }
    }

    /// Records `dev` and returns true when training should stop.
    fn update(&mut self, dev: f64) -> bool {
        if dev < self.best - self.min_delta {
            self.best = dev;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }
}

fn backward_and_step(t: &Tape, loss: Var, model: &mut ModelAssembly, adam: &mut Adam) -> Result<()> {
    model.store.zero_grad();
    t.backward(loss, &mut model.store)?;
    adam.step(&mut model.store)
}

fn save_epoch(opts: &RunOptions<'_>, ckpt: &Checkpoint, epoch: usize) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        ckpt.save(&dir.join(format!("{}_epoch{epoch:03}.ckpt", ckpt.phase)))?;
    }
    Ok(())
}

// ---- MT ---------------------------------------------------------------------

/// Per-token NLL of `y` given each source, in eval mode.
pub fn mt_dev_nll(model: &ModelAssembly, pairs: &[MtPair]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for p in pairs {
        let t = Tape::no_grad();
        let ctx = &mut ForwardCtx::eval();
        let enc = model.text_encoder_forward(&t, &p.x, ctx)?.output;
        nll += t.item(sequence_nll(&t, model, enc, &p.y, ctx)?);
        tokens += p.y.len() + 1;
    }
    Ok(nll / tokens.max(1) as f64)
}

/// Dev pairs with punctuation replaced by blanks.
pub fn noisy_pairs(model: &ModelAssembly, pairs: &[MtPair]) -> Vec<MtPair> {
    pairs
        .iter()
        .map(|p| MtPair { x: make_noisy_test(&p.x, &model.vocab), y: p.y.clone() })
        .collect()
}

pub fn run_mt_step(cfg: &PipelineConfig, corpus: &CorpusSplit, opts: &mut RunOptions<'_>) -> Result<PhaseOutcome> {
    cfg.validate()?;
    non_empty(&corpus.mt_train, "MT train")?;
    non_empty(&corpus.dev, "dev")?;
    let phase = Phase::Mt;
    let mut model = ModelAssembly::new(cfg.model_config(), cfg.seed)?;
    model.apply_freeze(&freeze_for_phase(phase, 0, cfg.warmup_freeze_steps));
    let mut adam = Adam::new(cfg.adam(), model.optimizer_params(phase));
    let batcher = Batcher::new(corpus.mt_train.len(), cfg.batch_size, sub_seed(cfg.seed, &[1]), phase)?;
    let dev = corpus.mt_dev();
    let noisy_dev = noisy_pairs(&model, &dev);
    let mut metrics = MetricsLog::default();
    let tag = phase.as_str();
    metrics.push(tag, 0, 0, "dev_nll", mt_dev_nll(&model, &dev)?);
    metrics.push(tag, 0, 0, "dev_noisy_nll", mt_dev_nll(&model, &noisy_dev)?);

    let mut stop = EarlyStop::new(cfg);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut epochs = 0;
    for epoch in 1..=cfg.mt_max_epochs {
        epochs = epoch;
        let (mut clean_sum, mut noisy_sum, mut tok_sum) = (0.0, 0.0, 0usize);
        for (bi, batch) in batcher.epoch(epoch as u64).iter().enumerate() {
            let t = Tape::new();
            let mut ctx = ForwardCtx::train(cfg.dropout, sub_seed(cfg.seed, &[1, epoch as u64, bi as u64, 0]));
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[1, epoch as u64, bi as u64, 1]));
            let mut terms = Vec::with_capacity(batch.len());
            let mut tokens = 0;
            for &i in batch {
                let p = &corpus.mt_train[i];
                let out = mt_denoising_loss(&t, &model, &p.x, &p.y, cfg.r, cfg.use_sidae, &mut rng, &mut ctx)?;
                clean_sum += t.item(out.clean_nll);
                noisy_sum += out.noisy_nll.map_or(0.0, |v| t.item(v));
                tokens += p.y.len() + 1;
                terms.push(out.total);
            }
            tok_sum += tokens;
            let loss = t.scale(t.add_n(&terms), 1.0 / tokens as f64);
            backward_and_step(&t, loss, &mut model, &mut adam)?;
            step += 1;
            opts.after_step(phase, step, &model);
        }
        let n = tok_sum.max(1) as f64;
        metrics.push(tag, epoch, step, "train_clean_nll", clean_sum / n);
        if cfg.use_sidae {
            metrics.push(tag, epoch, step, "train_noisy_nll", noisy_sum / n);
        }
        let dev_nll = mt_dev_nll(&model, &dev)?;
        metrics.push(tag, epoch, step, "dev_nll", dev_nll);
        metrics.push(tag, epoch, step, "dev_noisy_nll", mt_dev_nll(&model, &noisy_dev)?);
        let ckpt = snapshot(&model, phase, step, cfg, &adam);
        save_epoch(opts, &ckpt, epoch)?;
        checkpoints.push(ckpt);
        if stop.update(dev_nll) {
            log::info!("mt: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(PhaseOutcome { phase, model, checkpoints, steps: step, epochs, best_dev: stop.best, metrics })
}

// ---- ASR --------------------------------------------------------------------

pub struct AsrDevStats {
    /// Mean CTC NLL per feasible sample.
    pub ctc: f64,
    /// Mean cosine between pooled speech encoding and pooled text encoding.
    pub cosine: f64,
}

pub fn asr_dev_stats(model: &ModelAssembly, pairs: &[AsrPair]) -> Result<AsrDevStats> {
    let (mut ctc, mut n_ctc, mut cos) = (0.0, 0usize, 0.0);
    for p in pairs {
        let t = Tape::no_grad();
        let path = model.st_encode(&t, &p.s, &mut ForwardCtx::eval())?;
        match crate::losses::ctc_loss(&t, path.alignment.ctc_log_probs, &p.t, model.vocab.blank) {
            Ok(l) => {
                ctc += t.item(l);
                n_ctc += 1;
            }
            Err(Error::CtcInfeasible { .. }) => {}
            Err(e) => return Err(e),
        }
        cos += pooled_cosine(&t.value(path.encoded), &frozen_text_encoding(model, &p.t)?);
    }
    Ok(AsrDevStats {
        ctc: ctc / n_ctc.max(1) as f64,
        cosine: cos / pairs.len().max(1) as f64,
    })
}

pub fn run_asr_step(
    cfg: &PipelineConfig,
    corpus: &CorpusSplit,
    from_mt: &Checkpoint,
    opts: &mut RunOptions<'_>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    from_mt.check_handoff(Phase::Asr)?;
    non_empty(&corpus.asr_train, "ASR train")?;
    non_empty(&corpus.dev, "dev")?;
    let phase = Phase::Asr;
    let mut model = model_from_checkpoint(cfg, from_mt)?;
    let mut adam = Adam::new(cfg.adam(), model.optimizer_params(phase));
    let batcher = Batcher::new(corpus.asr_train.len(), cfg.batch_size, sub_seed(cfg.seed, &[2]), phase)?;
    let schedule = cfg.beta_schedule();
    let dev = corpus.asr_dev();
    let mut metrics = MetricsLog::default();
    let tag = phase.as_str();
    let stats = asr_dev_stats(&model, &dev)?;
    metrics.push(tag, 0, 0, "dev_ctc", stats.ctc);
    metrics.push(tag, 0, 0, "dev_cosine", stats.cosine);

    let mut stop = EarlyStop::new(cfg);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut epochs = 0;
    for epoch in 1..=cfg.asr_max_epochs {
        epochs = epoch;
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for (bi, batch) in batcher.epoch(epoch as u64).iter().enumerate() {
            model.apply_freeze(&freeze_for_phase(phase, step, cfg.warmup_freeze_steps));
            let beta = schedule.at(step);
            metrics.push(tag, epoch, step, "beta", beta);
            let loss_cfg = AsrLossConfig {
                tau: cfg.tau,
                alpha: cfg.alpha,
                beta,
                use_cl: cfg.use_cl,
                use_kd: cfg.use_kd,
                include_positive: cfg.include_positive,
            };
            let samples: Vec<AsrSample> = batch
                .iter()
                .map(|&i| AsrSample { speech: &corpus.asr_train[i].s, transcript: &corpus.asr_train[i].t })
                .collect();
            let t = Tape::new();
            let mut ctx = ForwardCtx::train(cfg.dropout, sub_seed(cfg.seed, &[2, epoch as u64, bi as u64]));
            let out = asr_loss(&t, &model, &samples, &loss_cfg, &mut ctx)?;
            if cfg.use_cl && cfg.use_kd {
                assert_eq!(out.breakdown.beta, beta, "beta used must equal the schedule");
            }
            let b = out.breakdown;
            for (s, v) in sums.iter_mut().zip([b.ctc, b.cl, b.cl_kd, b.total]) {
                *s += v / samples.len() as f64;
            }
            batches += 1;
            let loss = t.scale(out.total, 1.0 / samples.len() as f64);
            backward_and_step(&t, loss, &mut model, &mut adam)?;
            step += 1;
            opts.after_step(phase, step, &model);
        }
        let n = batches.max(1) as f64;
        for (name, s) in ["train_ctc", "train_cl", "train_cl_kd", "train_total"].iter().zip(sums) {
            metrics.push(tag, epoch, step, name, s / n);
        }
        let stats = asr_dev_stats(&model, &dev)?;
        metrics.push(tag, epoch, step, "dev_ctc", stats.ctc);
        metrics.push(tag, epoch, step, "dev_cosine", stats.cosine);
        let ckpt = snapshot(&model, phase, step, cfg, &adam);
        save_epoch(opts, &ckpt, epoch)?;
        checkpoints.push(ckpt);
        if stop.update(stats.ctc) {
            log::info!("asr: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(PhaseOutcome { phase, model, checkpoints, steps: step, epochs, best_dev: stop.best, metrics })
}

// ---- ST ---------------------------------------------------------------------

/// Per-token NLL of `y` through the speech path, in eval mode.
pub fn st_dev_nll(model: &ModelAssembly, pairs: &[StPair]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for p in pairs {
        let t = Tape::no_grad();
        let ctx = &mut ForwardCtx::eval();
        let mem = model.st_encode(&t, &p.s, ctx)?.encoded;
        nll += t.item(sequence_nll(&t, model, mem, &p.y, ctx)?);
        tokens += p.y.len() + 1;
    }
    Ok(nll / tokens.max(1) as f64)
}

/// How long an ST run lasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StSchedule {
    /// Up to `st_max_epochs` with early stopping.
    EarlyStopping,
    /// Exactly this many epochs.
    FixedEpochs(usize),
}

fn train_st(
    cfg: &PipelineConfig,
    corpus: &CorpusSplit,
    mut model: ModelAssembly,
    schedule: StSchedule,
    tag: &str,
    opts: &mut RunOptions<'_>,
) -> Result<PhaseOutcome> {
    non_empty(&corpus.st_train, "ST train")?;
    non_empty(&corpus.dev, "dev")?;
    let phase = Phase::St;
    model.apply_freeze(&freeze_for_phase(phase, 0, cfg.warmup_freeze_steps));
    let mut adam = Adam::new(cfg.adam(), model.optimizer_params(phase));
    let batcher = Batcher::new(corpus.st_train.len(), cfg.batch_size, sub_seed(cfg.seed, &[3]), phase)?;
    let dev = corpus.st_dev();
    let mut metrics = MetricsLog::default();
    metrics.push(tag, 0, 0, "dev_st_nll", st_dev_nll(&model, &dev)?);

    let max_epochs = match schedule {
        StSchedule::EarlyStopping => cfg.st_max_epochs,
        StSchedule::FixedEpochs(n) => n,
    };
    let mut stop = EarlyStop::new(cfg);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut epochs = 0;
    for epoch in 1..=max_epochs {
        epochs = epoch;
        let mut train_sum = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batcher.epoch(epoch as u64).iter().enumerate() {
            let t = Tape::new();
            let mut ctx = ForwardCtx::train(cfg.dropout, sub_seed(cfg.seed, &[3, epoch as u64, bi as u64]));
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let p = &corpus.st_train[i];
                let memory = model.st_encode(&t, &p.s, &mut ctx)?.encoded;
                let (prefix, target) = teacher_forcing(&model, &p.y);
                let logits = model.decoder_forward(&t, memory, &prefix, &mut ctx)?.logits;
                let l = label_smoothed_ce(&t, logits, &target, cfg.label_smoothing, model.vocab.pad)?;
                train_sum += t.item(l);
                terms.push(l);
            }
            count += batch.len();
            let loss = t.scale(t.add_n(&terms), 1.0 / batch.len() as f64);
            backward_and_step(&t, loss, &mut model, &mut adam)?;
            step += 1;
            opts.after_step(phase, step, &model);
        }
        metrics.push(tag, epoch, step, "train_st_ce", train_sum / count.max(1) as f64);
        let dev_nll = st_dev_nll(&model, &dev)?;
        metrics.push(tag, epoch, step, "dev_st_nll", dev_nll);
        let ckpt = snapshot(&model, phase, step, cfg, &adam);
        save_epoch(opts, &ckpt, epoch)?;
        checkpoints.push(ckpt);
        if stop.update(dev_nll) && schedule == StSchedule::EarlyStopping {
            log::info!("{tag}: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(PhaseOutcome { phase, model, checkpoints, steps: step, epochs, best_dev: stop.best, metrics })
}

pub fn run_st_step(
    cfg: &PipelineConfig,
    corpus: &CorpusSplit,
    from_asr: &Checkpoint,
    opts: &mut RunOptions<'_>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    from_asr.check_handoff(Phase::St)?;
    let model = model_from_checkpoint(cfg, from_asr)?;
    train_st(cfg, corpus, model, StSchedule::EarlyStopping, Phase::St.as_str(), opts)
}

/// ST training from a fresh initialization with no pre-training.
pub fn run_st_from_scratch(
    cfg: &PipelineConfig,
    corpus: &CorpusSplit,
    schedule: StSchedule,
    opts: &mut RunOptions<'_>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    let model = ModelAssembly::new(cfg.model_config(), cfg.seed)?;
    train_st(cfg, corpus, model, schedule, "baseline", opts)
}

/// Averaged final ST model and its dev loss.
pub struct FinalModel {
    pub checkpoint: Checkpoint,
    pub model: ModelAssembly,
    pub dev_st_nll: f64,
}

pub fn finalize_st(cfg: &PipelineConfig, corpus: &CorpusSplit, st: &PhaseOutcome) -> Result<FinalModel> {
    let checkpoint = st.averaged(cfg.checkpoint_average_k)?;
    let model = model_from_checkpoint(cfg, &checkpoint)?;
    let dev_st_nll = st_dev_nll(&model, &corpus.st_dev())?;
    Ok(FinalModel { checkpoint, model, dev_st_nll })
}

pub struct PipelineReport {
    pub mt: PhaseOutcome,
    pub asr: PhaseOutcome,
    pub st: PhaseOutcome,
    pub final_model: FinalModel,
    pub metrics: MetricsLog,
}

/// MT, then ASR from the last MT state, then ST from the last ASR state; the
/// final model averages the last `checkpoint_average_k` ST checkpoints.
pub fn run_pipeline(cfg: &PipelineConfig, corpus: &CorpusSplit, opts: &mut RunOptions<'_>) -> Result<PipelineReport> {
    let mt = run_mt_step(cfg, corpus, opts)?;
    let asr = run_asr_step(cfg, corpus, mt.last_checkpoint(), opts)?;
    let st = run_st_step(cfg, corpus, asr.last_checkpoint(), opts)?;
    let final_model = finalize_st(cfg, corpus, &st)?;
    let mut metrics = MetricsLog::default();
    metrics.extend(mt.metrics.clone());
    metrics.extend(asr.metrics.clone());
    metrics.extend(st.metrics.clone());
    metrics.push("st", st.epochs, st.steps, "final_dev_st_nll", final_model.dev_st_nll);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        metrics.write(&dir.join("metrics.csv"))?;
        final_model.checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(PipelineReport { mt, asr, st, final_model, metrics })
}

/// Cosine between the time-averaged rows of two sequences.
pub fn pooled_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let mean = |m: &Tensor| {
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, x) in out.iter_mut().zip(m.row(r)) {
                *o += x / m.rows() as f64;
            }
        }
        out
    };
    cosine(&mean(a), &mean(b))
}

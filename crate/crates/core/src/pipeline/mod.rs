//! Three-step training: MT on text pairs, ASR on speech/transcript pairs with
//! the text encoder frozen, then ST on speech/translation pairs.

mod checkpoint;
mod config;
mod metrics;
mod train;

pub use checkpoint::{average_checkpoint_files, average_checkpoints, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::PipelineConfig;
pub use metrics::{MetricRow, MetricsLog};
pub use train::{
    asr_dev_stats, finalize_st, model_from_checkpoint, mt_dev_nll, noisy_pairs, pooled_cosine,
    run_asr_step, run_mt_step, run_pipeline, run_st_from_scratch, run_st_step, st_dev_nll,
    AsrDevStats, FinalModel, PhaseOutcome, PipelineReport, RunOptions, StSchedule, StepHook,
};

use sha2::{Digest, Sha256};

use crate::model::{Block, ModelAssembly};

/// SHA-256 over the raw bytes of every parameter in `block`, by name order.
pub fn block_digest(model: &ModelAssembly, block: Block) -> [u8; 32] {
    let mut h = Sha256::new();
    for (_, p) in model.store.iter().filter(|(_, p)| Block::of_param(&p.name) == Some(block)) {
        h.update(p.name.as_bytes());
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::gen_corpus;
    use crate::model::Phase;
    use std::cell::RefCell;
    use std::rc::Rc;

    pub(crate) fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        for kv in [
            "vocab_size=12", "feature_dim=4", "min_len=2", "max_len=3", "kmin=4", "kmax=5",
            "mt_train=12", "asr_train=8", "st_train=6", "dev=4", "test=4",
            "model_dim=8", "heads=2", "ffn_dim=16", "conv_layers=2", "speech_layers=1",
            "text_layers=1", "decoder_layers=1", "batch_size=4",
            "mt_max_epochs=2", "asr_max_epochs=2", "st_max_epochs=3",
            "warmup_freeze_steps=3", "beta_interval=2", "checkpoint_average_k=2",
        ] {
            c.apply_override(kv).unwrap();
        }
        c
    }

    #[test]
    fn phases_run_in_order_and_respect_freezing() {
        let cfg = tiny_config();
        let corpus = gen_corpus(&cfg.task_spec(), cfg.data_seed).unwrap();
        let seen: Rc<RefCell<Vec<(Phase, u64, [u8; 32], [u8; 32])>>> = Rc::default();
        let sink = Rc::clone(&seen);
        let mut opts = RunOptions {
            out_dir: None,
            hook: Some(Box::new(move |phase, step, m: &ModelAssembly| {
                sink.borrow_mut().push((
                    phase,
                    step,
                    block_digest(m, Block::TextEncoder),
                    block_digest(m, Block::SpeechEncoder),
                ));
            })),
        };
        let report = run_pipeline(&cfg, &corpus, &mut opts).unwrap();
        assert_eq!(report.metrics.phase_order(), vec!["mt", "asr", "st"]);

        let log = seen.borrow();
        let phases: Vec<Phase> = log.iter().map(|e| e.0).collect();
        let mut sorted = phases.clone();
        sorted.sort();
        assert_eq!(phases, sorted);

        let mt_end = model_from_checkpoint(&cfg, report.mt.last_checkpoint()).unwrap();
        let text_after_mt = block_digest(&mt_end, Block::TextEncoder);
        let speech_at_start = block_digest(&mt_end, Block::SpeechEncoder);
        for (phase, step, text, speech) in log.iter() {
            if *phase == Phase::Asr {
                assert_eq!(*text, text_after_mt);
                if *step <= cfg.warmup_freeze_steps {
                    assert_eq!(*speech, speech_at_start, "speech encoder moved at step {step}");
                }
            }
        }
        assert_ne!(block_digest(&report.asr.model, Block::SpeechEncoder), speech_at_start);
        assert_eq!(block_digest(&report.st.model, Block::TextEncoder), text_after_mt);

        let betas = report.asr.metrics.series("asr", "beta");
        let schedule = cfg.beta_schedule();
        for (n, b) in betas.iter().enumerate() {
            assert_eq!(*b, schedule.at(n as u64));
        }

        let st_adam = report.st.last_checkpoint().adam.as_ref().unwrap();
        assert!(st_adam.m.keys().all(|k| !k.starts_with("text_encoder")));
        assert!(report.final_model.checkpoint.adam.is_none());
    }

    #[test]
    fn handoff_rejects_wrong_phase() {
        let cfg = tiny_config();
        let corpus = gen_corpus(&cfg.task_spec(), 0).unwrap();
        let mt = run_mt_step(&cfg, &corpus, &mut RunOptions::default()).unwrap();
        assert!(run_st_step(&cfg, &corpus, mt.last_checkpoint(), &mut RunOptions::default()).is_err());
    }

    #[test]
    fn empty_split_is_an_error() {
        let cfg = tiny_config();
        let mut corpus = gen_corpus(&cfg.task_spec(), 0).unwrap();
        corpus.mt_train.clear();
        assert!(run_mt_step(&cfg, &corpus, &mut RunOptions::default()).is_err());
    }
}

//! Decoding, BLEU, analysis probes and the command-line entry point.

pub mod analysis;
pub mod bleu;
pub mod cli;
pub mod decode;

pub use analysis::{
    analysis_report, attention_entropy, crossmodal_similarity, mean_cross_modal, noise_split_bleu, AnalysisReport,
    AnalysisRow, NoiseSplit, ProbeAccumulator, ProbeRow,
};
pub use bleu::corpus_bleu;
pub use cli::run;
pub use decode::{beam_search, beam_search_with, ctc_greedy_decode, greedy_with, BeamConfig, DecodeResult, ModelScorer, StepScorer, TableScorer};

//! Multi-step pre-training for end-to-end speech translation, at desk scale.
//!
//! The crate trains a speech translation model in three steps: a denoising
//! text encoder and decoder on `(x, y)` text pairs, then a speech encoder with
//! alignment and textual adapters on `(s, t)` pairs under CTC plus contrastive
//! supervision from the frozen text encoder, and finally the full speech path
//! with the decoder on `(s, y)` pairs. Everything runs on a small in-crate
//! autodiff core over synthetic data.

pub mod data;
pub mod error;
pub mod evalcli;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};

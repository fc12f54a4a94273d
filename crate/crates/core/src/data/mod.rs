//! Synthetic speech/transcript/translation corpus, the blank-insertion noise,
//! batching, and on-disk corpus files.
//!
//! A sentence `x` is a run of content tokens with occasional punctuation. The
//! transcript `t` is `x` itself. The translation `y` reverses the content
//! tokens of `x` and maps each through a fixed permutation; punctuation has
//! no counterpart in `y`. Speech repeats a per-token codebook vector for a
//! random number of frames and adds Gaussian noise.

mod batch;
mod io;
mod noise;

pub use batch::{pad_tokens, Batcher, PaddedTokens};
pub use io::{load_corpus, save_corpus, MANIFEST};
pub use noise::{
    blank_count, blank_perturb, blank_ratio, make_noisy_test, split_by_blank_ratio, strip_blanks,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{SharedVocab, TokenId, TokenSeq};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSizes {
    pub mt_train: usize,
    pub asr_train: usize,
    pub st_train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames per token are drawn uniformly from `kmin..=kmax`.
    pub kmin: usize,
    pub kmax: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Chance that a punctuation token follows a content token.
    pub punctuation_prob: f64,
    pub mapping_seed: u64,
    pub sizes: SplitSizes,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 24,
            min_len: 3,
            max_len: 7,
            kmin: 8,
            kmax: 12,
            feature_dim: 16,
            noise_sigma: 0.3,
            punctuation_prob: 0.25,
            mapping_seed: 17,
            sizes: SplitSizes {
                mt_train: 400,
                asr_train: 200,
                st_train: 60,
                dev: 40,
                test: 40,
            },
        }
    }
}

impl SyntheticTaskSpec {
    pub fn vocab(&self) -> Result<SharedVocab> {
        SharedVocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.kmin < 1 || self.kmax < self.kmin {
            return bad("need 1 <= kmin <= kmax");
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.punctuation_prob) {
            return bad("punctuation_prob must be in [0, 1)");
        }
        Ok(())
    }

    /// Target-side image of each content token.
    pub fn target_mapping(&self) -> Result<TargetMapping> {
        let vocab = self.vocab()?;
        let content: Vec<TokenId> = vocab.content().collect();
        let mut image = content.clone();
        image.shuffle(&mut ChaCha8Rng::seed_from_u64(self.mapping_seed));
        let mut table = vec![None; vocab.size];
        for (&src, &dst) in content.iter().zip(&image) {
            table[src] = Some(dst);
        }
        Ok(TargetMapping { table })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMapping {
    table: Vec<Option<TokenId>>,
}

impl TargetMapping {
    pub fn map_token(&self, tok: TokenId) -> Option<TokenId> {
        self.table.get(tok).copied().flatten()
    }

    /// `y` for a source sentence: content tokens reversed and mapped.
    pub fn translate(&self, x: &[TokenId]) -> TokenSeq {
        x.iter().rev().filter_map(|&t| self.map_token(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    /// `T x feature_dim` frames.
    pub s: Tensor,
    pub t: TokenSeq,
    pub x: TokenSeq,
    pub y: TokenSeq,
    /// Frames emitted per token of `t`.
    pub durations: Vec<usize>,
}

impl Quadruple {
    pub fn mt(&self) -> MtPair {
        MtPair { x: self.x.clone(), y: self.y.clone() }
    }

    pub fn asr(&self) -> AsrPair {
        AsrPair { s: self.s.clone(), t: self.t.clone() }
    }

    pub fn st(&self) -> StPair {
        StPair { s: self.s.clone(), y: self.y.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtPair {
    pub x: TokenSeq,
    pub y: TokenSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsrPair {
    pub s: Tensor,
    pub t: TokenSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StPair {
    pub s: Tensor,
    pub y: TokenSeq,
}

/// Training pairs by type plus held-out quadruples.
///
/// Every sentence belongs to exactly one of the five sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub mt_train: Vec<MtPair>,
    pub asr_train: Vec<AsrPair>,
    pub st_train: Vec<StPair>,
    pub dev: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
}

impl CorpusSplit {
    pub fn vocab(&self) -> Result<SharedVocab> {
        SharedVocab::new(self.vocab_size)
    }

    pub fn mt_dev(&self) -> Vec<MtPair> {
        self.dev.iter().map(Quadruple::mt).collect()
    }

    pub fn asr_dev(&self) -> Vec<AsrPair> {
        self.dev.iter().map(Quadruple::asr).collect()
    }

    pub fn st_dev(&self) -> Vec<StPair> {
        self.dev.iter().map(Quadruple::st).collect()
    }
}

struct Synth<'a> {
    spec: &'a SyntheticTaskSpec,
    vocab: SharedVocab,
    mapping: TargetMapping,
    codebook: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl Synth<'_> {
    fn sentence(&self, rng: &mut ChaCha8Rng) -> TokenSeq {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let content = self.vocab.content();
        let mut x = Vec::with_capacity(len * 2);
        for i in 0..len {
            x.push(rng.random_range(content.clone()));
            // punctuation only between content tokens or at the end
            if i + 1 < len || rng.random_bool(0.5) {
                if rng.random_bool(self.spec.punctuation_prob) {
                    let p = self.vocab.punctuation[rng.random_range(0..self.vocab.punctuation.len())];
                    x.push(p);
                }
            }
        }
        x
    }

    fn quadruple(&self, x: TokenSeq, rng: &mut ChaCha8Rng) -> Quadruple {
        let dim = self.spec.feature_dim;
        let durations: Vec<usize> = x
            .iter()
            .map(|_| rng.random_range(self.spec.kmin..=self.spec.kmax))
            .collect();
        let frames: usize = durations.iter().sum();
        let mut data = Vec::with_capacity(frames * dim);
        for (&tok, &k) in x.iter().zip(&durations) {
            for _ in 0..k {
                data.extend(self.codebook[tok].iter().map(|c| c + self.noise.sample(rng)));
            }
        }
        Quadruple {
            s: Tensor::matrix(frames, dim, data).expect("frame buffer size"),
            t: x.clone(),
            y: self.mapping.translate(&x),
            x,
            durations,
        }
    }
}

/// Deterministic corpus for `(spec, seed)`.
pub fn gen_corpus(spec: &SyntheticTaskSpec, seed: u64) -> Result<CorpusSplit> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook: Vec<Vec<f64>> = (0..vocab.size)
        .map(|_| (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let synth = Synth {
        spec,
        mapping: spec.target_mapping()?,
        noise: Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?,
        vocab,
        codebook,
    };
    let sz = &spec.sizes;
    let total = sz.mt_train + sz.asr_train + sz.st_train + sz.dev + sz.test;
    let mut seen = BTreeSet::new();
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > total * 100 + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {total} distinct sentences from this vocabulary and length range"
            )));
        }
        let x = synth.sentence(&mut rng);
        if seen.insert(x.clone()) {
            sentences.push(x);
        }
    }
    let mut quads = sentences.into_iter().map(|x| synth.quadruple(x, &mut rng));
    let mut take = |n: usize| quads.by_ref().take(n).collect::<Vec<_>>();
    let mt_train = take(sz.mt_train).iter().map(Quadruple::mt).collect();
    let asr_train = take(sz.asr_train).iter().map(Quadruple::asr).collect();
    let st_train = take(sz.st_train).iter().map(Quadruple::st).collect();
    let dev = take(sz.dev);
    let test = take(sz.test);
    Ok(CorpusSplit {
        vocab_size: spec.vocab_size,
        feature_dim: spec.feature_dim,
        mt_train,
        asr_train,
        st_train,
        dev,
        test,
    })
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Phase, TokenId};

/// Shuffled index batches, reshuffled per epoch from `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    seed: u64,
    min_batch: usize,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64, phase: Phase) -> Result<Self> {
        let min_batch = if phase == Phase::Asr { 2 } else { 1 };
        if batch_size < min_batch {
            return Err(Error::BatchTooSmall(batch_size));
        }
        if len < min_batch {
            return Err(Error::BatchTooSmall(len));
        }
        Ok(Batcher { len, batch_size, seed, min_batch })
    }

    /// A trailing batch smaller than the phase minimum joins the one before it.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < self.min_batch) {
            let tail = batches.pop().unwrap_or_default();
            batches.last_mut().expect("at least one batch").extend(tail);
        }
        batches
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedTokens {
    /// `batch x max_len`, right-padded.
    pub tokens: Vec<Vec<TokenId>>,
    /// `true` where the position holds a real token.
    pub mask: Vec<Vec<bool>>,
}

pub fn pad_tokens(seqs: &[&[TokenId]], pad: TokenId) -> PaddedTokens {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let tokens = seqs
        .iter()
        .map(|s| {
            let mut row = s.to_vec();
            row.resize(width, pad);
            row
        })
        .collect();
    let mask = seqs.iter().map(|s| (0..width).map(|i| i < s.len()).collect()).collect();
    PaddedTokens { tokens, mask }
}

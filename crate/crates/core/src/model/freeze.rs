use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The trainable blocks of the assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    SpeechEncoder,
    AlignmentAdapter,
    TextualAdapter,
    TextEncoder,
    Decoder,
    SharedEmbedding,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::SpeechEncoder,
        Block::AlignmentAdapter,
        Block::TextualAdapter,
        Block::TextEncoder,
        Block::Decoder,
        Block::SharedEmbedding,
    ];

    /// Parameter-name prefix owned by the block.
    pub fn prefix(self) -> &'static str {
        match self {
            Block::SpeechEncoder => "speech_encoder",
            Block::AlignmentAdapter => "alignment_adapter",
            Block::TextualAdapter => "textual_adapter",
            Block::TextEncoder => "text_encoder",
            Block::Decoder => "decoder",
            Block::SharedEmbedding => "shared_embedding",
        }
    }

    pub fn of_param(name: &str) -> Option<Block> {
        Block::ALL
            .into_iter()
            .find(|b| name == b.prefix() || name.starts_with(&format!("{}.", b.prefix())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Mt,
    Asr,
    St,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mt => "mt",
            Phase::Asr => "asr",
            Phase::St => "st",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Phase::Mt => 1,
            Phase::Asr => 2,
            Phase::St => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Phase> {
        match tag {
            1 => Ok(Phase::Mt),
            2 => Ok(Phase::Asr),
            3 => Ok(Phase::St),
            _ => Err(Error::Checkpoint(format!("unknown phase tag {tag}"))),
        }
    }

    /// Blocks handed to the optimizer for the whole phase.
    pub fn optimizer_blocks(self) -> &'static [Block] {
        match self {
            Phase::Mt => &[Block::TextEncoder, Block::Decoder, Block::SharedEmbedding],
            Phase::Asr => &[
                Block::SpeechEncoder,
                Block::AlignmentAdapter,
                Block::TextualAdapter,
            ],
            Phase::St => &[
                Block::SpeechEncoder,
                Block::AlignmentAdapter,
                Block::TextualAdapter,
                Block::Decoder,
                Block::SharedEmbedding,
            ],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mt" => Ok(Phase::Mt),
            "asr" => Ok(Phase::Asr),
            "st" => Ok(Phase::St),
            other => Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        }
    }
}

/// Per-block trainability at one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: BTreeMap<Block, bool>,
}

impl FreezeMask {
    pub fn is_trainable(&self, block: Block) -> bool {
        self.trainable.get(&block).copied().unwrap_or(false)
    }
}

/// Trainable blocks for `phase` at phase-local `step`.
///
/// The text encoder is never trained outside the MT phase. During ASR the
/// speech encoder stays frozen for the first `warmup_freeze_steps` updates
/// while the adapters warm up, and the shared embedding stays fixed so the
/// CTC projection keeps pointing into the text encoder's space.
pub fn freeze_for_phase(phase: Phase, step: u64, warmup_freeze_steps: u64) -> FreezeMask {
    let mut trainable: BTreeMap<Block, bool> = Block::ALL.iter().map(|&b| (b, false)).collect();
    for &b in phase.optimizer_blocks() {
        trainable.insert(b, true);
    }
    if phase == Phase::Asr && step < warmup_freeze_steps {
        trainable.insert(Block::SpeechEncoder, false);
    }
    FreezeMask { trainable }
}

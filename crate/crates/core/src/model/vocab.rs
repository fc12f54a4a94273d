use std::ops::Range;

use crate::error::{Error, Result};

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

/// One vocabulary shared by transcriptions, source text, and targets.
///
/// Layout: pad, bos, eos, blank, then the punctuation ids, then content ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedVocab {
    pub size: usize,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub blank: TokenId,
    pub punctuation: Vec<TokenId>,
}

impl SharedVocab {
    pub const NUM_PUNCTUATION: usize = 3;
    pub const NUM_RESERVED: usize = 4 + Self::NUM_PUNCTUATION;

    pub fn new(size: usize) -> Result<Self> {
        if size <= Self::NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab size {size} leaves no content tokens (reserved {})",
                Self::NUM_RESERVED
            )));
        }
        let v = SharedVocab {
            size,
            pad: 0,
            bos: 1,
            eos: 2,
            blank: 3,
            punctuation: (4..4 + Self::NUM_PUNCTUATION).collect(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let special = [self.pad, self.bos, self.eos];
        if special.contains(&self.blank) {
            return Err(Error::Config("blank id collides with pad/bos/eos".into()));
        }
        let all_ids = special.iter().chain([&self.blank]).chain(&self.punctuation);
        if let Some(&bad) = all_ids.clone().find(|&&id| id >= self.size) {
            return Err(Error::OutOfVocab {
                id: bad,
                vocab: self.size,
            });
        }
        Ok(())
    }

    pub fn content(&self) -> Range<TokenId> {
        Self::NUM_RESERVED..self.size
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        self.content().contains(&id)
    }

    /// Ids the decoder never emits: padding, bos and the CTC blank.
    pub fn decoder_excluded(&self) -> [TokenId; 3] {
        [self.pad, self.bos, self.blank]
    }

    pub fn is_punctuation(&self, id: TokenId) -> bool {
        self.punctuation.contains(&id)
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&id| id >= self.size) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab: self.size,
            }),
            None => Ok(()),
        }
    }
}

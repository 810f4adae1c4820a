//! Deterministic synthetic token corpora for desk-scale training runs.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Token ids of the alphabet the synthetic tasks draw from: bytes `a..=h`.
pub const ALPHABET: [usize; 8] = [97, 98, 99, 100, 101, 102, 103, 104];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// Random first half followed by an exact copy of it.
    Copy,
    /// A random pattern of 2 to 4 symbols tiled to the sequence length.
    Repeat,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "repeat" => Ok(Self::Repeat),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus {other:?}; expected copy or repeat"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub kind: CorpusKind,
    pub seed: u64,
    pub seq_len: usize,
    pub size: usize,
}

impl SyntheticCorpus {
    pub fn new(kind: CorpusKind, seed: u64, seq_len: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("corpus size must be positive".into()));
        }
        let min_len = match kind {
            CorpusKind::Copy => 4,
            CorpusKind::Repeat => 2,
        };
        if seq_len < min_len || (kind == CorpusKind::Copy && seq_len % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "sequence length {seq_len} unsuitable for the {kind:?} task"
            )));
        }
        Ok(Self {
            kind,
            seed,
            seq_len,
            size,
        })
    }

    /// Sequence `index mod size`. Each sequence depends only on the seed and
    /// its index.
    pub fn sequence(&self, index: usize) -> Vec<usize> {
        let i = (index % self.size) as u64;
        let mut rng = Rng::new(self.seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut draw = || ALPHABET[rng.below(ALPHABET.len())];
        match self.kind {
            CorpusKind::Copy => {
                let half: Vec<usize> = (0..self.seq_len / 2).map(|_| draw()).collect();
                half.iter().chain(&half).copied().collect()
            }
            CorpusKind::Repeat => {
                let period = 2 + (draw() % 3);
                let pattern: Vec<usize> = (0..period).map(|_| draw()).collect();
                pattern.iter().cycle().take(self.seq_len).copied().collect()
            }
        }
    }

    /// `batch` consecutive sequences starting at `batch_index * batch`.
    pub fn batch(&self, batch_index: usize, batch: usize) -> Vec<Vec<usize>> {
        (0..batch).map(|j| self.sequence(batch_index * batch + j)).collect()
    }
}

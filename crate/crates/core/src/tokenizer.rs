//! Tokenizer boundary and the byte-level default.

use crate::error::{Error, Result};

pub const BOS_ID: usize = 256;
pub const EOS_ID: usize = 257;
pub const PAD_ID: usize = 258;
pub const BYTE_VOCAB_SIZE: usize = 259;

pub trait Tokenizer {
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> Result<String>;
    fn bos_id(&self) -> usize;
    fn eos_id(&self) -> usize;
    fn pad_id(&self) -> usize;
}

/// One id per UTF-8 byte, plus three special ids.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Special ids are dropped; byte sequences that are not valid UTF-8 are
    /// replaced with U+FFFD.
    fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                BOS_ID | EOS_ID | PAD_ID => {}
                _ => {
                    return Err(Error::TokenOutOfRange {
                        id,
                        vocab: BYTE_VOCAB_SIZE,
                    })
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn bos_id(&self) -> usize {
        BOS_ID
    }

    fn eos_id(&self) -> usize {
        EOS_ID
    }

    fn pad_id(&self) -> usize {
        PAD_ID
    }
}

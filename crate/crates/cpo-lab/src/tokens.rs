//! Token sequences and the end-of-sequence convention.
//!
//! Token ids are dense `usize` values in `[0, vocab_size)`. Id 0 is reserved
//! as the end-of-sequence marker and may appear only as the final element of
//! a sequence, so "ends with EOS" and "contains EOS" coincide and every
//! sequence probability factorizes cleanly over positions.

use crate::error::{Error, Result};

/// Reserved end-of-sequence token id.
pub const EOS: usize = 0;

/// A validated, non-empty run of token ids in which EOS appears at most once
/// and only as the final element.
///
/// Vocabulary bounds are checked where sequences meet a model or a corpus,
/// not here, so the same sequence value can move between models.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Builds a sequence, rejecting empty input and any interior EOS.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidSequence("empty sequence".into()));
        }
        if let Some(pos) = ids[..ids.len() - 1].iter().position(|&t| t == EOS) {
            return Err(Error::InvalidSequence(format!(
                "EOS at interior position {pos} of {} tokens",
                ids.len()
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ends_with_eos(&self) -> bool {
        *self.ids.last().expect("sequences are non-empty") == EOS
    }

    /// The ids with any trailing EOS stripped. Empty only for the degenerate
    /// sequence `[EOS]`.
    pub fn body(&self) -> &[usize] {
        if self.ends_with_eos() {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }

    /// Checks every id against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidSequence(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }

    /// Concatenates a prefix and a continuation into one model input.
    /// The prefix must be EOS-free or the result would hide an interior EOS.
    pub fn concat(prefix: &TokenSequence, continuation: &TokenSequence) -> Result<Vec<usize>> {
        if prefix.ends_with_eos() {
            return Err(Error::InvalidSequence(
                "prefix may not contain EOS".into(),
            ));
        }
        let mut ids = Vec::with_capacity(prefix.len() + continuation.len());
        ids.extend_from_slice(prefix.ids());
        ids.extend_from_slice(continuation.ids());
        Ok(ids)
    }
}

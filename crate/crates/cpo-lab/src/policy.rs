//! Scoring and sampling interfaces over sequence distributions.
//!
//! Evaluation code is generic over "something that assigns conditional
//! probabilities to continuations": the trained transformer, a weight-space
//! ensemble of transformers, or the synthetic-corpus generator itself (which
//! knows its own exact probabilities). A continuation that does not end in
//! EOS is scored as the probability of emitting exactly those tokens and is
//! read as "the sequence so far", which keeps truncated generations
//! comparable under every scorer.

use crate::error::Result;
use crate::model::{sample_topk, sequence_logprob, ModelConfig, Parameters};
use crate::tokens::TokenSequence;

/// Assigns `log P(continuation | prefix)`.
pub trait SequenceScorer {
    fn vocab_size(&self) -> usize;
    fn log_prob(&self, prefix: &TokenSequence, continuation: &TokenSequence) -> Result<f64>;
}

/// A scorer that can also draw continuations from itself.
pub trait SequenceSampler: SequenceScorer {
    /// Draws one continuation, stopping at EOS or after `max_new` tokens.
    /// Equal `(prefix, seed)` must reproduce the same draw.
    fn sample(&self, prefix: &TokenSequence, max_new: usize, seed: u64) -> Result<TokenSequence>;
}

/// A transformer checkpoint viewed as a sequence distribution. Sampling is
/// top-k truncated; scoring uses the full softmax.
#[derive(Debug, Clone, Copy)]
pub struct TransformerPolicy<'a> {
    pub params: &'a Parameters,
    pub config: &'a ModelConfig,
    pub topk: usize,
}

impl<'a> TransformerPolicy<'a> {
    pub fn new(params: &'a Parameters, config: &'a ModelConfig, topk: usize) -> Self {
        Self {
            params,
            config,
            topk,
        }
    }

    /// Greedy decoding view (top-1).
    pub fn greedy(params: &'a Parameters, config: &'a ModelConfig) -> Self {
        Self::new(params, config, 1)
    }
}

impl SequenceScorer for TransformerPolicy<'_> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_prob(&self, prefix: &TokenSequence, continuation: &TokenSequence) -> Result<f64> {
        sequence_logprob(self.params, self.config, prefix, continuation)
    }
}

impl SequenceSampler for TransformerPolicy<'_> {
    fn sample(&self, prefix: &TokenSequence, max_new: usize, seed: u64) -> Result<TokenSequence> {
        sample_topk(self.params, self.config, prefix, self.topk, max_new, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, ModelConfig};

    #[test]
    fn transformer_policy_scores_like_the_underlying_model() {
        let config = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 16,
        };
        let params = init_parameters(&config, 3).unwrap();
        let policy = TransformerPolicy::new(&params, &config, 3);
        let prefix = TokenSequence::new(vec![2, 4]).unwrap();
        let cont = TokenSequence::new(vec![1, 5, 0]).unwrap();
        let a = policy.log_prob(&prefix, &cont).unwrap();
        let b = sequence_logprob(&params, &config, &prefix, &cont).unwrap();
        assert_eq!(a, b);
        let s1 = policy.sample(&prefix, 5, 11).unwrap();
        let s2 = policy.sample(&prefix, 5, 11).unwrap();
        assert_eq!(s1, s2);
    }
}

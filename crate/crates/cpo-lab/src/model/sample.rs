//! Top-k autoregressive sampling.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::forward::forward_ids;
use crate::model::params::Parameters;
use crate::tokens::{TokenSequence, EOS};

/// Samples a continuation of `prefix` by iterated top-k draws.
///
/// Each step keeps the `k` highest logits (ties broken toward the lower
/// token id, so the cut is deterministic), renormalizes their softmax, and
/// draws one token from the seeded stream. Generation stops when EOS is
/// drawn, after `max_new` tokens, or at the context limit, whichever comes
/// first; `k = 1` is greedy decoding. Equal `(params, prefix, k, seed)`
/// always produce the same continuation.
pub fn sample_topk(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    k: usize,
    max_new: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if k == 0 || k > config.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "top-k of {k} outside 1..={}",
            config.vocab_size
        )));
    }
    if max_new == 0 {
        return Err(Error::InvalidConfig("max_new must be positive".into()));
    }
    if prefix.ends_with_eos() {
        return Err(Error::InvalidSequence(
            "cannot continue a terminated prefix".into(),
        ));
    }
    if prefix.len() + 1 > config.max_context {
        return Err(Error::ContextOverflow {
            len: prefix.len() + 1,
            max_context: config.max_context,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = prefix.ids().to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= config.max_context {
            break;
        }
        let trace = forward_ids(params, config, &ids)?;
        let row = trace.logits_at(ids.len() - 1);
        let tok = draw_topk(row, k, &mut rng);
        ids.push(tok);
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    TokenSequence::new(out)
}

/// One top-k draw from a logit row.
pub(crate) fn draw_topk(row: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);

    let m = order.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| (row[i] - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..1.0) * total;
    for (j, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return order[j];
        }
    }
    *order.last().expect("k >= 1")
}

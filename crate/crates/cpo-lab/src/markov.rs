//! Synthetic corpus generator: an order-2 Markov chain with exact scoring.
//!
//! The chain plays the role of the data-generating distribution. Because its
//! conditionals are closed-form tables, it doubles as the evaluation oracle:
//! reverse KL and length-normalised NLL against it are computed from true
//! probabilities rather than estimates.
//!
//! Each conditional row for a state `(a, b)` (the two most recent tokens) is
//! built deterministically from the generator seed:
//!
//! ```text
//! row[EOS]  = hazard + smoothing / V
//! row[v]    = smoothing / V                      for every non-EOS v
//! row[f_i] += (1 - hazard - smoothing) * w_i     for fan_out favored tokens
//! ```
//!
//! with favored tokens drawn without replacement from the non-EOS vocabulary
//! and weights `w_i` proportional to Uniform(0.5, 1.5) draws. The row is then
//! normalised once so it sums to 1 at floating-point precision; scoring and
//! sampling share that normalised table, so the scored measure is exactly the
//! sampled one. Rows are recomputed on demand from the seed (no mutable
//! state), which keeps the generator `Sync` and cheap to share.
//!
//! A position with only one preceding token `b` uses the state `(b, b)`;
//! scoring always conditions on a non-empty prefix, so no position is ever
//! stateless.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{SequenceSampler, SequenceScorer};
use crate::seeding::{stream_rng, Stream};
use crate::tokens::{TokenSequence, EOS};

fn default_vocab() -> usize {
    64
}
fn default_hazard() -> f64 {
    0.15
}
fn default_smoothing() -> f64 {
    0.08
}
fn default_fan_out() -> usize {
    6
}
fn default_prefix_len() -> usize {
    6
}
fn default_max_cont() -> usize {
    16
}

/// Shape of the synthetic data distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarkovSpec {
    /// Token alphabet size including EOS; conditionals are rows over it.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Per-step probability mass on EOS before smoothing.
    #[serde(default = "default_hazard")]
    pub eos_hazard: f64,
    /// Mass spread uniformly over the whole vocabulary (keeps every token
    /// scoreable, so model samples never get probability zero).
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    /// Favored next-tokens per state sharing the remaining mass.
    #[serde(default = "default_fan_out")]
    pub fan_out: usize,
    /// Prompt length of generated corpus pairs.
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    /// Continuation length cap for corpus pairs, EOS included.
    #[serde(default = "default_max_cont")]
    pub max_cont: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        Self {
            vocab_size: default_vocab(),
            eos_hazard: default_hazard(),
            smoothing: default_smoothing(),
            fan_out: default_fan_out(),
            prefix_len: default_prefix_len(),
            max_cont: default_max_cont(),
            seed: 0,
        }
    }
}

impl MarkovSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(
                "markov vocab_size must be at least 2 (EOS plus one body token)".into(),
            ));
        }
        if !(self.eos_hazard > 0.0 && self.eos_hazard < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eos_hazard must lie in (0, 1), got {}",
                self.eos_hazard
            )));
        }
        if !(self.smoothing >= 0.0 && self.eos_hazard + self.smoothing <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "smoothing must be >= 0 with eos_hazard + smoothing <= 1, got {}",
                self.smoothing
            )));
        }
        if self.fan_out == 0 || self.fan_out > self.vocab_size - 1 {
            return Err(Error::InvalidConfig(format!(
                "fan_out must lie in 1..={}, got {}",
                self.vocab_size - 1,
                self.fan_out
            )));
        }
        if self.prefix_len == 0 {
            return Err(Error::InvalidConfig("prefix_len must be positive".into()));
        }
        if self.max_cont == 0 {
            return Err(Error::InvalidConfig("max_cont must be positive".into()));
        }
        Ok(())
    }
}

/// The chain itself: stateless beyond its spec, rows derived on demand.
#[derive(Debug, Clone)]
pub struct MarkovGenerator {
    spec: MarkovSpec,
}

// Retry budget when a corpus continuation fails to emit EOS within max_cont.
const CONT_RETRIES: usize = 200;

impl MarkovGenerator {
    pub fn new(spec: MarkovSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MarkovSpec {
        &self.spec
    }

    fn state_of(&self, context: &[usize]) -> (usize, usize) {
        match context {
            [] => unreachable!("scoring always conditions on a non-empty context"),
            [b] => (*b, *b),
            [.., a, b] => (*a, *b),
        }
    }

    fn row(&self, state: (usize, usize)) -> Vec<f64> {
        let v = self.spec.vocab_size;
        let idx = (state.0 * v + state.1) as u64;
        let mut rng = stream_rng(self.spec.seed, Stream::MarkovRow, idx);
        let mut row = vec![self.spec.smoothing / v as f64; v];
        row[EOS] += self.spec.eos_hazard;
        let favored_mass = 1.0 - self.spec.eos_hazard - self.spec.smoothing;
        // Partial Fisher-Yates over the non-EOS vocabulary picks the favored set.
        let mut pool: Vec<usize> = (1..v).collect();
        let mut favored = Vec::with_capacity(self.spec.fan_out);
        for i in 0..self.spec.fan_out {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            favored.push(pool[i]);
        }
        let weights: Vec<f64> = favored.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
        let wsum: f64 = weights.iter().sum();
        for (&t, &w) in favored.iter().zip(&weights) {
            row[t] += favored_mass * w / wsum;
        }
        let total: f64 = row.iter().sum();
        for p in &mut row {
            *p /= total;
        }
        row
    }

    /// The exact next-token distribution after `context` (most recent last).
    pub fn conditional_row(&self, context: &[usize]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::InvalidSequence(
                "conditional_row needs at least one context token".into(),
            ));
        }
        for &t in context {
            if t >= self.spec.vocab_size {
                return Err(Error::InvalidSequence(format!(
                    "token {t} out of vocabulary {}",
                    self.spec.vocab_size
                )));
            }
        }
        Ok(self.row(self.state_of(context)))
    }

    fn draw_from_row(row: &[f64], rng: &mut impl Rng) -> usize {
        let total: f64 = row.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        for (t, &p) in row.iter().enumerate() {
            if u < p {
                return t;
            }
            u -= p;
        }
        row.len() - 1
    }

    fn draw_nonterminal(&self, state: (usize, usize), rng: &mut impl Rng) -> usize {
        let row = self.row(state);
        1 + Self::draw_from_row(&row[1..], rng)
    }

    /// Draws `n` (prefix, continuation) pairs. `run` namespaces independent
    /// corpora under the same generator seed (train vs held-out).
    pub fn sample_pairs(&self, n: usize, run: u64) -> Result<Vec<(TokenSequence, TokenSequence)>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream_rng(
                self.spec.seed,
                Stream::Corpus,
                run.rotate_left(32) ^ i as u64,
            );
            let pair = self.sample_pair(&mut rng)?;
            out.push(pair);
        }
        Ok(out)
    }

    fn sample_pair(&self, rng: &mut impl Rng) -> Result<(TokenSequence, TokenSequence)> {
        let v = self.spec.vocab_size;
        let mut prefix = vec![rng.gen_range(1..v)];
        while prefix.len() < self.spec.prefix_len {
            let state = self.state_of(&prefix);
            prefix.push(self.draw_nonterminal(state, rng));
        }
        // Conditioned on terminating within max_cont: rejected draws are
        // rare at the default hazard and keep every stored pair scoreable
        // as a complete sequence.
        for _ in 0..CONT_RETRIES {
            if let Some(cont) = self.try_continuation(&prefix, rng) {
                return Ok((TokenSequence::new(prefix)?, TokenSequence::new(cont)?));
            }
        }
        Err(Error::InvalidConfig(format!(
            "no EOS within max_cont={} after {CONT_RETRIES} attempts; raise eos_hazard or max_cont",
            self.spec.max_cont
        )))
    }

    fn try_continuation(&self, prefix: &[usize], rng: &mut impl Rng) -> Option<Vec<usize>> {
        let mut full = prefix.to_vec();
        let mut cont = Vec::new();
        loop {
            let t = Self::draw_from_row(&self.row(self.state_of(&full)), rng);
            cont.push(t);
            if t == EOS {
                return Some(cont);
            }
            if cont.len() >= self.spec.max_cont {
                return None;
            }
            full.push(t);
        }
    }
}

impl SequenceScorer for MarkovGenerator {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn log_prob(&self, prefix: &TokenSequence, continuation: &TokenSequence) -> Result<f64> {
        prefix.check_vocab(self.spec.vocab_size)?;
        continuation.check_vocab(self.spec.vocab_size)?;
        let full = TokenSequence::concat(prefix, continuation)?;
        let mut acc = 0.0;
        for t in prefix.len()..full.len() {
            let row = self.row(self.state_of(&full[..t]));
            acc += row[full[t]].ln();
        }
        Ok(acc)
    }
}

impl SequenceSampler for MarkovGenerator {
    fn sample(&self, prefix: &TokenSequence, max_new: usize, seed: u64) -> Result<TokenSequence> {
        if max_new == 0 {
            return Err(Error::InvalidConfig("max_new must be positive".into()));
        }
        if prefix.ends_with_eos() {
            return Err(Error::InvalidSequence(
                "cannot continue an EOS-terminated prefix".into(),
            ));
        }
        prefix.check_vocab(self.spec.vocab_size)?;
        let mut rng = stream_rng(seed, Stream::Eval, 0);
        let mut full = prefix.ids().to_vec();
        let mut cont = Vec::new();
        while cont.len() < max_new {
            let t = Self::draw_from_row(&self.row(self.state_of(&full)), &mut rng);
            cont.push(t);
            if t == EOS {
                break;
            }
            full.push(t);
        }
        TokenSequence::new(cont)
    }
}

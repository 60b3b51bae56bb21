//! Synthetic negative continuations and preference-group assembly.
//!
//! Four generators produce "worse than ground truth" continuations without
//! any human labels:
//!
//! - AN (autoregressive): sampled from the reference model with top-k
//!   truncation. Highest quality, slowest; pre-generated once and cached.
//! - BN (batch): continuations borrowed from other examples in the same
//!   mini-batch, drawn without replacement.
//! - MN (meanfield): the ground truth with a fixed fraction of positions
//!   independently resampled from the model's own conditional at each
//!   position given the original left context.
//! - TN (truncation): the ground truth cut at a random interior position
//!   with EOS re-appended.
//!
//! A `PreferenceGroup` packages one prefix with its ground truth at index 0
//! and the configured mixture of negatives after it; a ranking permutation
//! may be attached later by the ranking module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_ids, sample_topk, ForwardTrace, ModelConfig, Parameters};
use crate::objectives::Ranking;
use crate::seeding::{derive_seed, stream_rng, Stream};
use crate::tokens::{TokenSequence, EOS};

/// Where a candidate continuation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "GT")]
    GroundTruth,
    #[serde(rename = "AN")]
    Autoregressive,
    #[serde(rename = "BN")]
    Batch,
    #[serde(rename = "MN")]
    MeanField,
    #[serde(rename = "TN")]
    Truncation,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::GroundTruth => "GT",
            Provenance::Autoregressive => "AN",
            Provenance::Batch => "BN",
            Provenance::MeanField => "MN",
            Provenance::Truncation => "TN",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "GT" => Some(Provenance::GroundTruth),
            "AN" => Some(Provenance::Autoregressive),
            "BN" => Some(Provenance::Batch),
            "MN" => Some(Provenance::MeanField),
            "TN" => Some(Provenance::Truncation),
            _ => None,
        }
    }
}

fn default_topk() -> usize {
    50
}
fn default_swap_fraction() -> f64 {
    0.15
}
fn default_n_bn() -> usize {
    3
}
fn default_n_mn() -> usize {
    5
}
fn default_n_tn() -> usize {
    3
}

/// Per-group counts of each negative kind. Autoregressive negatives default
/// to zero because they require a pre-generated cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixCounts {
    #[serde(default = "default_n_bn")]
    pub n_bn: usize,
    #[serde(default = "default_n_mn")]
    pub n_mn: usize,
    #[serde(default = "default_n_tn")]
    pub n_tn: usize,
    #[serde(default)]
    pub n_an: usize,
}

impl Default for MixCounts {
    fn default() -> Self {
        Self {
            n_bn: default_n_bn(),
            n_mn: default_n_mn(),
            n_tn: default_n_tn(),
            n_an: 0,
        }
    }
}

impl MixCounts {
    pub fn total(&self) -> usize {
        self.n_bn + self.n_mn + self.n_tn + self.n_an
    }
}

/// Knobs of all four samplers plus the mixture recipe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NegativeSamplerConfig {
    /// Top-k cutoff for autoregressive negatives.
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Fraction of positions resampled by meanfield negatives.
    #[serde(default = "default_swap_fraction")]
    pub swap_fraction: f64,
    #[serde(default)]
    pub mix: MixCounts,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NegativeSamplerConfig {
    fn default() -> Self {
        Self {
            topk: default_topk(),
            swap_fraction: default_swap_fraction(),
            mix: MixCounts::default(),
            seed: 0,
        }
    }
}

impl NegativeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 {
            return Err(Error::InvalidConfig("topk must be positive".into()));
        }
        if !(self.swap_fraction > 0.0 && self.swap_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "swap_fraction must lie in (0, 1], got {}",
                self.swap_fraction
            )));
        }
        if self.mix.total() == 0 {
            return Err(Error::InvalidConfig(
                "negative mix is empty: a preference group needs at least one negative".into(),
            ));
        }
        Ok(())
    }

    /// Full validation against the model the samplers will run on.
    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        self.validate()?;
        if self.topk > config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "topk {} exceeds vocabulary {}",
                self.topk, config.vocab_size
            )));
        }
        Ok(())
    }
}

/// One prefix, its ground truth at index 0, and K-1 negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceGroup {
    pub prefix: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub provenance: Vec<Provenance>,
    pub ranking: Option<Ranking>,
}

impl PreferenceGroup {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "preference group needs at least 2 candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.provenance.len() != self.candidates.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} candidates but {} provenance tags",
                self.candidates.len(),
                self.provenance.len()
            )));
        }
        if self.provenance[0] != Provenance::GroundTruth {
            return Err(Error::InvalidConfig(
                "candidate 0 must be the ground truth".into(),
            ));
        }
        if self.provenance[1..].contains(&Provenance::GroundTruth) {
            return Err(Error::InvalidConfig(
                "ground truth may appear only at index 0".into(),
            ));
        }
        if self.prefix.ends_with_eos() {
            return Err(Error::InvalidSequence(
                "group prefix may not be EOS-terminated".into(),
            ));
        }
        if let Some(ranking) = &self.ranking {
            if ranking.k() != self.candidates.len() {
                return Err(Error::InvalidRanking(format!(
                    "ranking over {} candidates attached to a group of {}",
                    ranking.k(),
                    self.candidates.len()
                )));
            }
        }
        Ok(())
    }
}

/// Draws `n` top-k continuations of `prefix` from the given model, one
/// independent sub-stream per sample. Samples run until EOS or the end of
/// the model context.
pub fn gen_autoregressive(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    n: usize,
    scfg: &NegativeSamplerConfig,
) -> Result<Vec<TokenSequence>> {
    if prefix.len() >= config.max_context {
        return Err(Error::ContextOverflow {
            len: prefix.len() + 1,
            max_context: config.max_context,
        });
    }
    let max_new = config.max_context - prefix.len();
    (0..n)
        .map(|i| {
            let seed = derive_seed(scfg.seed, Stream::Autoregressive, i as u64);
            sample_topk(params, config, prefix, scfg.topk, max_new, seed)
        })
        .collect()
}

/// Draws `n` continuations without replacement from the other examples of a
/// mini-batch (never the anchor's own, by index).
pub fn gen_batch(
    pairs: &[(TokenSequence, TokenSequence)],
    anchor: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if anchor >= pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "anchor index {anchor} outside batch of {}",
            pairs.len()
        )));
    }
    let have = pairs.len() - 1;
    if n > have {
        return Err(Error::InsufficientBatch { have, need: n });
    }
    let mut pool: Vec<usize> = (0..pairs.len()).filter(|&j| j != anchor).collect();
    let mut rng = stream_rng(seed, Stream::BatchNegative, 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        out.push(pairs[pool[i]].1.clone());
    }
    Ok(out)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// The body positions a mean-field perturbation with this seed resamples:
/// exactly `max(1, round(swap_fraction * cont_len))` distinct indices drawn
/// uniformly from `0..body_len`, in sorted order. Exposed so the selection
/// is externally checkable; resampled positions may redraw their original
/// token, so the selected set is not recoverable from the output alone.
pub fn meanfield_positions(
    body_len: usize,
    cont_len: usize,
    swap_fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::MeanField, 0);
    select_positions(body_len, cont_len, swap_fraction, &mut rng)
}

/// Partial Fisher-Yates draw of the resampled position set; the caller's RNG
/// continues afterwards with the replacement-token draws.
fn select_positions(
    body_len: usize,
    cont_len: usize,
    swap_fraction: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let count = round_half_up(swap_fraction * cont_len as f64)
        .max(1)
        .min(body_len);
    let mut pool: Vec<usize> = (0..body_len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut selected = pool[..count].to_vec();
    selected.sort_unstable();
    selected
}

/// Resamples a fixed fraction of positions of `cont` from the model's own
/// conditional at each position, conditioning on the ORIGINAL tokens to the
/// left (prefix plus unmodified continuation), so the perturbation is a
/// separable product over positions.
pub fn gen_meanfield(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    cont: &TokenSequence,
    swap_fraction: f64,
    seed: u64,
) -> Result<TokenSequence> {
    if cont.body().is_empty() {
        return Ok(cont.clone());
    }
    let ids = TokenSequence::concat(prefix, cont)?;
    let trace = forward_ids(params, config, &ids)?;
    gen_meanfield_from_trace(&trace, prefix.len(), cont, swap_fraction, seed)
}

/// Same as [`gen_meanfield`] but reuses an existing forward trace of
/// `prefix ⊕ cont`, so several perturbations of one sequence share one pass.
pub fn gen_meanfield_from_trace(
    trace: &ForwardTrace,
    prefix_len: usize,
    cont: &TokenSequence,
    swap_fraction: f64,
    seed: u64,
) -> Result<TokenSequence> {
    if !(swap_fraction > 0.0 && swap_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "swap_fraction must lie in (0, 1], got {swap_fraction}"
        )));
    }
    if trace.seq_len() != prefix_len + cont.len() {
        return Err(Error::ShapeMismatch(format!(
            "trace covers {} tokens, expected prefix {} + continuation {}",
            trace.seq_len(),
            prefix_len,
            cont.len()
        )));
    }
    let body_len = cont.body().len();
    if body_len == 0 {
        // Nothing perturbable in a bare [EOS] continuation.
        return Ok(cont.clone());
    }
    // Position count follows the full continuation length; selectable
    // positions exclude the final EOS so the output stays a valid sequence.
    let mut rng = stream_rng(seed, Stream::MeanField, 0);
    let selected = select_positions(body_len, cont.len(), swap_fraction, &mut rng);

    let mut ids = cont.ids().to_vec();
    let vocab = trace.config().vocab_size;
    for &t in &selected {
        // Conditional row for continuation position t sits at trace position
        // prefix_len + t - 1. EOS is excluded and the row renormalised: an
        // interior EOS would split the sequence.
        let row = trace.logits_at(prefix_len + t - 1);
        let mut m = f64::NEG_INFINITY;
        for v in 1..vocab {
            if row[v] > m {
                m = row[v];
            }
        }
        let weights: Vec<f64> = (1..vocab).map(|v| (row[v] - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        let mut pick = vocab - 1;
        for (off, &w) in weights.iter().enumerate() {
            if u < w {
                pick = off + 1;
                break;
            }
            u -= w;
        }
        ids[t] = pick;
    }
    TokenSequence::new(ids)
}

/// Cuts the continuation body at a uniform interior position and re-appends
/// EOS. A single-token body is "cut" at 1 (the only choice); a bare [EOS]
/// continuation is returned unchanged.
pub fn gen_truncation(cont: &TokenSequence, seed: u64) -> Result<TokenSequence> {
    let body = cont.body();
    if body.is_empty() {
        return Ok(cont.clone());
    }
    let hi = (body.len() - 1).max(1);
    let mut rng = stream_rng(seed, Stream::Truncation, 0);
    let cut = rng.gen_range(1..=hi);
    let mut ids = body[..cut].to_vec();
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Builds the preference group for one batch anchor: ground truth first,
/// then the configured mixture in BN, MN, TN, AN order. Meanfield
/// resampling draws from the frozen reference model's conditionals, which
/// keeps group assembly independent of the evolving training policy (the
/// current policy is a defensible alternative; the reference wins on
/// reproducibility). Autoregressive negatives must be pre-generated and
/// passed as `an_pool`. Ranking is left unset.
pub fn assemble_group(
    ref_params: &Parameters,
    config: &ModelConfig,
    pairs: &[(TokenSequence, TokenSequence)],
    anchor: usize,
    scfg: &NegativeSamplerConfig,
    an_pool: Option<&[TokenSequence]>,
    seed: u64,
) -> Result<PreferenceGroup> {
    scfg.validate_for(config)?;
    if anchor >= pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "anchor index {anchor} outside batch of {}",
            pairs.len()
        )));
    }
    let (prefix, gt) = &pairs[anchor];
    let mix = scfg.mix;
    let mut candidates = Vec::with_capacity(1 + mix.total());
    let mut provenance = Vec::with_capacity(1 + mix.total());
    candidates.push(gt.clone());
    provenance.push(Provenance::GroundTruth);

    if mix.n_bn > 0 {
        let bn = gen_batch(
            pairs,
            anchor,
            mix.n_bn,
            derive_seed(seed, Stream::BatchNegative, 0),
        )?;
        for c in bn {
            candidates.push(c);
            provenance.push(Provenance::Batch);
        }
    }
    if mix.n_mn > 0 {
        let ids = TokenSequence::concat(prefix, gt)?;
        let trace = forward_ids(ref_params, config, &ids)?;
        for i in 0..mix.n_mn {
            let mn = gen_meanfield_from_trace(
                &trace,
                prefix.len(),
                gt,
                scfg.swap_fraction,
                derive_seed(seed, Stream::MeanField, i as u64),
            )?;
            candidates.push(mn);
            provenance.push(Provenance::MeanField);
        }
    }
    for i in 0..mix.n_tn {
        let tn = gen_truncation(gt, derive_seed(seed, Stream::Truncation, i as u64))?;
        candidates.push(tn);
        provenance.push(Provenance::Truncation);
    }
    if mix.n_an > 0 {
        let pool = an_pool.ok_or_else(|| {
            Error::InvalidConfig(
                "autoregressive negatives requested but no pre-generated pool supplied".into(),
            )
        })?;
        if pool.len() < mix.n_an {
            return Err(Error::InsufficientBatch {
                have: pool.len(),
                need: mix.n_an,
            });
        }
        for c in &pool[..mix.n_an] {
            candidates.push(c.clone());
            provenance.push(Provenance::Autoregressive);
        }
    }

    let group = PreferenceGroup {
        prefix: prefix.clone(),
        candidates,
        provenance,
        ranking: None,
    };
    group.validate()?;
    Ok(group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 24,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn truncation_outputs_eos_terminated_prefixes_of_the_body() {
        let cont = seq(&[3, 1, 4, 1, 5, EOS]);
        for s in 0..200u64 {
            let t = gen_truncation(&cont, s).unwrap();
            assert!(t.ends_with_eos());
            let cut = t.len() - 1;
            assert!((1..=4).contains(&cut), "cut {cut}");
            assert_eq!(t.body(), &cont.body()[..cut]);
        }
        assert_eq!(gen_truncation(&seq(&[7]), 0).unwrap(), seq(&[7, EOS]));
        assert_eq!(gen_truncation(&seq(&[EOS]), 0).unwrap(), seq(&[EOS]));
        assert_eq!(
            gen_truncation(&cont, 9).unwrap(),
            gen_truncation(&cont, 9).unwrap()
        );
    }

    #[test]
    fn truncation_cuts_uniformly_over_interior_positions() {
        let cont = seq(&[3, 1, 4, 1, 5, EOS]);
        let n = 4000usize;
        let mut counts = [0usize; 4];
        for s in 0..n {
            let t = gen_truncation(&cont, s as u64).unwrap();
            counts[t.len() - 2] += 1;
        }
        let p = 0.25f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let diff = (c as f64 - n as f64 * p).abs();
            assert!(diff < 4.0 * sigma, "cut {}: count {c}", i + 1);
        }
    }

    #[test]
    fn batch_negatives_exclude_the_anchor_and_draw_uniformly() {
        let pairs: Vec<(TokenSequence, TokenSequence)> = (0..12)
            .map(|i| (seq(&[1, 2]), seq(&[i + 1, i + 2, EOS])))
            .collect();
        let anchor = 4usize;
        let trials = 11_000usize;
        let mut counts = vec![0usize; 12];
        for s in 0..trials {
            let bn = gen_batch(&pairs, anchor, 3, s as u64).unwrap();
            assert_eq!(bn.len(), 3);
            for c in &bn {
                assert_ne!(c, &pairs[anchor].1);
                let j = pairs.iter().position(|(_, cont)| cont == c).unwrap();
                counts[j] += 1;
            }
            // Without replacement within one call: all three distinct.
            assert!(bn[0] != bn[1] && bn[1] != bn[2] && bn[0] != bn[2]);
        }
        assert_eq!(counts[anchor], 0);
        let p = 3.0 / 11.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (j, &c) in counts.iter().enumerate() {
            if j == anchor {
                continue;
            }
            let diff = (c as f64 - trials as f64 * p).abs();
            assert!(diff < 4.0 * sigma, "index {j}: count {c}");
        }
    }

    #[test]
    fn batch_rejects_oversized_requests() {
        let pairs: Vec<(TokenSequence, TokenSequence)> =
            (0..3).map(|i| (seq(&[1]), seq(&[i + 1, EOS]))).collect();
        match gen_batch(&pairs, 0, 3, 7) {
            Err(Error::InsufficientBatch { have: 2, need: 3 }) => {}
            other => panic!("expected insufficient batch, got {other:?}"),
        }
        assert_eq!(gen_batch(&pairs, 1, 2, 7).unwrap().len(), 2);
    }

    #[test]
    fn meanfield_preserves_length_eos_and_unselected_positions() {
        let config = tiny_config();
        let params = init_parameters(&config, 5).unwrap();
        let prefix = seq(&[2, 3]);
        let body: Vec<usize> = (0..19).map(|i| 1 + (i % 7)).collect();
        let mut ids = body.clone();
        ids.push(EOS);
        let cont = seq(&ids); // |cont| = 20 -> exactly 3 positions selected
        for s in 0..50u64 {
            let mn = gen_meanfield(&params, &config, &prefix, &cont, 0.15, s).unwrap();
            assert_eq!(mn.len(), cont.len());
            assert!(mn.ends_with_eos());
            let differing = mn
                .body()
                .iter()
                .zip(cont.body())
                .filter(|(a, b)| a != b)
                .count();
            assert!(differing <= 3, "seed {s}: {differing} positions differ");
        }
        let a = gen_meanfield(&params, &config, &prefix, &cont, 0.15, 11).unwrap();
        let b = gen_meanfield(&params, &config, &prefix, &cont, 0.15, 11).unwrap();
        assert_eq!(a, b);
        // A bare EOS continuation has nothing to perturb.
        let bare = seq(&[EOS]);
        assert_eq!(
            gen_meanfield(&params, &config, &prefix, &bare, 0.15, 0).unwrap(),
            bare
        );
    }

    #[test]
    fn meanfield_replacements_follow_the_models_eos_free_conditional() {
        let config = ModelConfig {
            vocab_size: 6,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 8,
        };
        let params = init_parameters(&config, 9).unwrap();
        let prefix = seq(&[4, 2]);
        let cont = seq(&[3, EOS]); // single body position -> always selected
        let ids = TokenSequence::concat(&prefix, &cont).unwrap();
        let trace = forward_ids(&params, &config, &ids).unwrap();
        let row = trace.logits_at(prefix.len() - 1);
        let m = row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = (1..6).map(|v| (row[v] - m).exp()).collect();
        let total: f64 = weights.iter().sum();

        let n = 10_000usize;
        let mut counts = vec![0usize; 6];
        for s in 0..n {
            let mn = gen_meanfield(&params, &config, &prefix, &cont, 0.5, s as u64).unwrap();
            counts[mn.ids()[0]] += 1;
        }
        assert_eq!(counts[EOS], 0, "EOS must never be drawn as a replacement");
        for v in 1..6 {
            let p = weights[v - 1] / total;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[v] as f64 - n as f64 * p).abs();
            assert!(
                diff < 4.0 * sigma + 1.0,
                "token {v}: count {} vs expected {:.1}",
                counts[v],
                n as f64 * p
            );
        }
    }

    #[test]
    fn autoregressive_negatives_stay_within_each_steps_topk_set() {
        let config = tiny_config();
        let params = init_parameters(&config, 13).unwrap();
        let prefix = seq(&[5, 1, 6]);
        let scfg = NegativeSamplerConfig {
            topk: 3,
            seed: 21,
            ..NegativeSamplerConfig::default()
        };
        let samples = gen_autoregressive(&params, &config, &prefix, 20, &scfg).unwrap();
        assert_eq!(samples.len(), 20);
        for sample in &samples {
            let mut ctx = prefix.ids().to_vec();
            for &tok in sample.ids() {
                let trace = forward_ids(&params, &config, &ctx).unwrap();
                let row = trace.logits_at(ctx.len() - 1).to_vec();
                let mut order: Vec<usize> = (0..config.vocab_size).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                assert!(order[..3].contains(&tok), "token {tok} outside top-3");
                ctx.push(tok);
            }
        }
        let greedy_cfg = NegativeSamplerConfig {
            topk: 1,
            seed: 4,
            ..NegativeSamplerConfig::default()
        };
        let greedy = gen_autoregressive(&params, &config, &prefix, 5, &greedy_cfg).unwrap();
        assert!(greedy.windows(2).all(|w| w[0] == w[1]));
        assert!(gen_autoregressive(&params, &config, &prefix, 0, &scfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn assembled_groups_have_the_contracted_order_and_reproduce() {
        let config = tiny_config();
        let params = init_parameters(&config, 3).unwrap();
        let pairs: Vec<(TokenSequence, TokenSequence)> = (0..6)
            .map(|i| (seq(&[1 + i, 2]), seq(&[2 + i, 3, 4, EOS])))
            .collect();
        let scfg = NegativeSamplerConfig {
            topk: 4,
            mix: MixCounts {
                n_bn: 2,
                n_mn: 2,
                n_tn: 1,
                n_an: 0,
            },
            seed: 8,
            ..NegativeSamplerConfig::default()
        };
        let group = assemble_group(&params, &config, &pairs, 2, &scfg, None, 77).unwrap();
        assert_eq!(group.k(), 6);
        assert_eq!(group.prefix, pairs[2].0);
        assert_eq!(group.candidates[0], pairs[2].1);
        use Provenance::*;
        assert_eq!(
            group.provenance,
            vec![GroundTruth, Batch, Batch, MeanField, MeanField, Truncation]
        );
        assert!(group.ranking.is_none());
        let again = assemble_group(&params, &config, &pairs, 2, &scfg, None, 77).unwrap();
        assert_eq!(group, again);
        let other_seed = assemble_group(&params, &config, &pairs, 2, &scfg, None, 78).unwrap();
        assert_ne!(group, other_seed);
    }

    #[test]
    fn assembly_rejects_empty_mixes_and_missing_an_pool() {
        let config = tiny_config();
        let params = init_parameters(&config, 3).unwrap();
        let pairs = vec![(seq(&[1]), seq(&[2, EOS])), (seq(&[3]), seq(&[4, EOS]))];
        let empty = NegativeSamplerConfig {
            mix: MixCounts {
                n_bn: 0,
                n_mn: 0,
                n_tn: 0,
                n_an: 0,
            },
            ..NegativeSamplerConfig::default()
        };
        assert!(assemble_group(&params, &config, &pairs, 0, &empty, None, 1).is_err());

        let an_only = NegativeSamplerConfig {
            topk: 4,
            mix: MixCounts {
                n_bn: 0,
                n_mn: 0,
                n_tn: 0,
                n_an: 2,
            },
            ..NegativeSamplerConfig::default()
        };
        assert!(assemble_group(&params, &config, &pairs, 0, &an_only, None, 1).is_err());
        let pool = vec![seq(&[5, EOS]), seq(&[6, 7, EOS])];
        let group = assemble_group(&params, &config, &pairs, 0, &an_only, Some(&pool), 1).unwrap();
        assert_eq!(group.k(), 3);
        assert_eq!(group.candidates[1], pool[0]);
        assert_eq!(group.provenance[1], Provenance::Autoregressive);
        assert_eq!(group.provenance[2], Provenance::Autoregressive);
    }
}

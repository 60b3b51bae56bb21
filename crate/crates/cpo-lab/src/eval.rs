//! Weight-space ensembling and evaluation metrics.
//!
//! Generation quality is judged against an oracle distribution `P̂` that can
//! score any sequence exactly (at desk scale, the synthetic corpus generator
//! itself). Three views of quality are computed:
//!
//! ```text
//! reverse-KL surrogate:  (1/|X|) sum_x sum_{y in Y_x} Q(y|x) ln(Q(y|x) / P̂(y|x))
//! length-norm NLL:       (1/|X|) sum_x sum_y (-ln P̂(y|x)) / |y|
//! win rate:              fraction of prefixes where the greedy generation
//!                        scores a strictly lower length-norm NLL than the
//!                        ground truth (ties lose)
//! ```
//!
//! with `Y_x` a deduplicated set of model samples, unnormalised, so the
//! surrogate is faithful to its definition (it may go negative on partial
//! sample sets; the exact enumerated KL exists to calibrate it in tests).
//! `gt_top1_rate` measures preference learning directly: the fraction of
//! held-out groups whose ground truth earns the strictly largest implicit
//! reward `log pi_theta - log pi_ref` among all candidates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_topk, sequence_logprob, ModelConfig, Parameters};
use crate::negatives::PreferenceGroup;
use crate::parallel::{map_indexed, worker_threads};
use crate::policy::{SequenceSampler, SequenceScorer, TransformerPolicy};
use crate::seeding::{derive_seed, Stream};
use crate::tokens::{TokenSequence, EOS};

/// A point on the segment between two trained parameter vectors.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleSpec<'a> {
    pub alpha: f64,
    pub theta_mle: &'a Parameters,
    pub theta_cpo: &'a Parameters,
}

/// `alpha * theta_mle + (1 - alpha) * theta_cpo`, elementwise. The endpoints
/// are returned as bit-exact copies of their source, never recomputed
/// through arithmetic.
pub fn interpolate_parameters(spec: &EnsembleSpec) -> Result<Parameters> {
    if !(spec.alpha.is_finite() && (0.0..=1.0).contains(&spec.alpha)) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in [0, 1], got {}",
            spec.alpha
        )));
    }
    if spec.theta_mle.len() != spec.theta_cpo.len() {
        return Err(Error::ShapeMismatch(format!(
            "ensemble endpoints have {} and {} parameters",
            spec.theta_mle.len(),
            spec.theta_cpo.len()
        )));
    }
    if spec.alpha == 1.0 {
        return Ok(spec.theta_mle.clone());
    }
    if spec.alpha == 0.0 {
        return Ok(spec.theta_cpo.clone());
    }
    let a = spec.alpha;
    let flat: Vec<f64> = spec
        .theta_mle
        .flat()
        .iter()
        .zip(spec.theta_cpo.flat())
        .map(|(&m, &c)| a * m + (1.0 - a) * c)
        .collect();
    Ok(Parameters::from_raw(flat))
}

/// One evaluation snapshot. Serialised as JSONL with exactly these field
/// names, one record per line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_loss: f64,
    pub reverse_kl: f64,
    pub length_norm_nll: f64,
    pub gt_top1_rate: f64,
    pub win_rate: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train_loss", self.train_loss),
            ("reverse_kl", self.reverse_kl),
            ("length_norm_nll", self.length_norm_nll),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} is not finite: {v}")));
            }
        }
        for (name, r) in [
            ("gt_top1_rate", self.gt_top1_rate),
            ("win_rate", self.win_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Writes metric records as JSONL.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        record.validate()?;
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a JSONL metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str::<MetricsRecord>(l)?))
        .collect()
}

// Sequence weights below exp(-700) underflow to zero in the surrogate sum;
// skipping them early avoids 0 * inf when the oracle also scores them low.
const LOG_Q_FLOOR: f64 = -700.0;

fn surrogate_term<Q, O>(
    q: &Q,
    oracle: &O,
    prefix: &TokenSequence,
    samples: &[TokenSequence],
) -> Result<f64>
where
    Q: SequenceScorer + ?Sized,
    O: SequenceScorer + ?Sized,
{
    let mut acc = 0.0;
    for y in samples {
        let lq = q.log_prob(prefix, y)?;
        if lq < LOG_Q_FLOOR {
            continue;
        }
        let lp = oracle.log_prob(prefix, y)?;
        acc += lq.exp() * (lq - lp);
    }
    Ok(acc)
}

/// Reverse-KL surrogate over explicit per-prefix sample sets. Sample lists
/// are deduplicated (they stand for sets); no renormalisation is applied.
pub fn reverse_kl_with_samples<Q, O>(
    q: &Q,
    oracle: &O,
    items: &[(TokenSequence, Vec<TokenSequence>)],
) -> Result<f64>
where
    Q: SequenceScorer + ?Sized + Sync,
    O: SequenceScorer + ?Sized + Sync,
{
    if items.is_empty() {
        return Err(Error::InvalidConfig(
            "reverse-KL needs at least one prefix".into(),
        ));
    }
    let terms = map_indexed(items.len(), worker_threads(), |i| {
        let (prefix, samples) = &items[i];
        let mut set = samples.clone();
        set.sort();
        set.dedup();
        surrogate_term(q, oracle, prefix, &set)
    });
    let mut total = 0.0;
    for term in terms {
        total += term?;
    }
    Ok(total / items.len() as f64)
}

/// Reverse-KL surrogate with the sample sets drawn from `q` itself:
/// `samples_per_prefix` draws per prefix, capped at `max_new` new tokens.
pub fn reverse_kl_surrogate<Q, O>(
    q: &Q,
    oracle: &O,
    prefixes: &[TokenSequence],
    samples_per_prefix: usize,
    max_new: usize,
    seed: u64,
) -> Result<f64>
where
    Q: SequenceSampler + ?Sized + Sync,
    O: SequenceScorer + ?Sized + Sync,
{
    if samples_per_prefix == 0 {
        return Err(Error::InvalidConfig(
            "samples_per_prefix must be positive".into(),
        ));
    }
    if q.vocab_size() > oracle.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "oracle vocabulary {} cannot score model vocabulary {}",
            oracle.vocab_size(),
            q.vocab_size()
        )));
    }
    let items: Vec<(TokenSequence, Vec<TokenSequence>)> = map_indexed(
        prefixes.len(),
        worker_threads(),
        |i| -> Result<(TokenSequence, Vec<TokenSequence>)> {
            let mut samples = Vec::with_capacity(samples_per_prefix);
            for j in 0..samples_per_prefix {
                let draw_seed =
                    derive_seed(seed, Stream::Eval, (i * samples_per_prefix + j) as u64);
                samples.push(q.sample(&prefixes[i], max_new, draw_seed)?);
            }
            Ok((prefixes[i].clone(), samples))
        },
    )
    .into_iter()
    .collect::<Result<_>>()?;
    reverse_kl_with_samples(q, oracle, &items)
}

/// Exact reverse KL on an enumerable space: both distributions restricted to
/// all EOS-terminated sequences of length <= max_len, checked to carry at
/// least 1 - 1e-6 of their mass there, then renormalised.
pub fn exact_reverse_kl_enum<Q, O>(
    q: &Q,
    oracle: &O,
    prefix: &TokenSequence,
    max_len: usize,
) -> Result<f64>
where
    Q: SequenceScorer + ?Sized,
    O: SequenceScorer + ?Sized,
{
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }
    let vocab = q.vocab_size();
    if vocab != oracle.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "exact KL needs matching vocabularies, got {} and {}",
            vocab,
            oracle.vocab_size()
        )));
    }
    let space = (vocab as u128).checked_pow(max_len as u32).unwrap_or(u128::MAX);
    if space > 1_000_000 {
        return Err(Error::SpaceTooLarge(space.min(u64::MAX as u128) as u64));
    }

    // Every EOS-terminated continuation with body length 0..=max_len-1.
    let mut qs: Vec<f64> = Vec::new();
    let mut ps: Vec<f64> = Vec::new();
    let mut body: Vec<usize> = Vec::new();
    loop {
        let mut ids = body.clone();
        ids.push(EOS);
        let y = TokenSequence::new(ids).expect("EOS-terminated body is valid");
        qs.push(q.log_prob(prefix, &y)?.exp());
        ps.push(oracle.log_prob(prefix, &y)?.exp());
        // Odometer over bodies of length < max_len with digits 1..vocab.
        if body.len() + 1 < max_len {
            body.push(1);
            continue;
        }
        loop {
            match body.last_mut() {
                None => break,
                Some(last) if *last + 1 < vocab => {
                    *last += 1;
                    break;
                }
                Some(_) => {
                    body.pop();
                }
            }
        }
        if body.is_empty() {
            break;
        }
    }

    let q_mass: f64 = qs.iter().sum();
    let p_mass: f64 = ps.iter().sum();
    if q_mass < 1.0 - 1e-6 {
        return Err(Error::MassDeficit {
            which: "model distribution",
            mass: q_mass,
        });
    }
    if p_mass < 1.0 - 1e-6 {
        return Err(Error::MassDeficit {
            which: "oracle distribution",
            mass: p_mass,
        });
    }
    let mut kl = 0.0;
    for (&qy, &py) in qs.iter().zip(&ps) {
        let qn = qy / q_mass;
        if qn == 0.0 {
            continue;
        }
        let pn = py / p_mass;
        if pn == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += qn * (qn / pn).ln();
    }
    Ok(kl)
}

/// Length-normalised oracle NLL: `(1/|X|) sum_x sum_y (-ln P̂(y|x)) / |y|`,
/// with `|y|` counting every token of the generation, EOS included.
pub fn length_norm_nll<O>(
    oracle: &O,
    items: &[(TokenSequence, Vec<TokenSequence>)],
) -> Result<f64>
where
    O: SequenceScorer + ?Sized + Sync,
{
    if items.is_empty() || items.iter().all(|(_, gens)| gens.is_empty()) {
        return Err(Error::InvalidConfig("empty generation set".into()));
    }
    let sums = map_indexed(items.len(), worker_threads(), |i| -> Result<f64> {
        let (prefix, gens) = &items[i];
        let mut acc = 0.0;
        for y in gens {
            let lp = oracle.log_prob(prefix, y)?;
            acc += -lp / y.len() as f64;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / items.len() as f64)
}

/// Greedy-generation win rate under the oracle judge: a prefix is won when
/// the model's greedy continuation has STRICTLY lower length-normalised NLL
/// than the ground truth (ties lose for the model).
pub fn win_rate_oracle<O>(
    params: &Parameters,
    config: &ModelConfig,
    oracle: &O,
    pairs: &[(TokenSequence, TokenSequence)],
    max_new: usize,
    seed: u64,
) -> Result<f64>
where
    O: SequenceScorer + ?Sized + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("empty win-rate test set".into()));
    }
    let wins = map_indexed(pairs.len(), worker_threads(), |i| -> Result<bool> {
        let (prefix, gt) = &pairs[i];
        let generation = sample_topk(
            params,
            config,
            prefix,
            1,
            max_new,
            derive_seed(seed, Stream::Eval, i as u64),
        )?;
        let gen_score = -oracle.log_prob(prefix, &generation)? / generation.len() as f64;
        let gt_score = -oracle.log_prob(prefix, gt)? / gt.len() as f64;
        Ok(gen_score < gt_score)
    });
    let mut won = 0usize;
    for w in wins {
        if w? {
            won += 1;
        }
    }
    Ok(won as f64 / pairs.len() as f64)
}

/// Fraction of groups whose ground truth earns the strictly largest implicit
/// reward `log pi_theta - log pi_ref` among all candidates (ties lose).
pub fn gt_top1_rate(
    params: &Parameters,
    config: &ModelConfig,
    ref_params: &Parameters,
    groups: &[PreferenceGroup],
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("no held-out groups".into()));
    }
    let tops = map_indexed(groups.len(), worker_threads(), |i| -> Result<bool> {
        let group = &groups[i];
        group.validate()?;
        let mut ratios = Vec::with_capacity(group.k());
        for cand in &group.candidates {
            let theta_lp = sequence_logprob(params, config, &group.prefix, cand)?;
            let ref_lp = sequence_logprob(ref_params, config, &group.prefix, cand)?;
            ratios.push(theta_lp - ref_lp);
        }
        Ok(ratios[1..].iter().all(|&r| ratios[0] > r))
    });
    let mut won = 0usize;
    for t in tops {
        if t? {
            won += 1;
        }
    }
    Ok(won as f64 / groups.len() as f64)
}

/// Held-out data for recurring evaluation during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    /// Groups for gt_top1_rate (fixed at creation, shared across models).
    pub heldout_groups: &'a [PreferenceGroup],
    /// Prefixes for the reverse-KL surrogate.
    pub kl_prefixes: &'a [TokenSequence],
    /// (prefix, ground truth) pairs for win rate and length-norm NLL.
    pub winrate_pairs: &'a [(TokenSequence, TokenSequence)],
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Samples per prefix in the reverse-KL surrogate.
    pub samples_per_prefix: usize,
    /// Top-k cutoff used when the evaluated model samples.
    pub sample_topk: usize,
    /// New-token cap for every generation.
    pub max_new: usize,
    pub seed: u64,
}

/// Bundles the oracle, reference model, and held-out data so the training
/// loop can emit a full `MetricsRecord` from just the current parameters.
/// Reference log-probabilities over the held-out groups are cached once.
pub struct Evaluator<'a> {
    oracle: &'a (dyn SequenceScorer + Sync),
    config: &'a ModelConfig,
    sets: EvalSets<'a>,
    opts: EvalOptions,
    ref_group_logprobs: Vec<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        oracle: &'a (dyn SequenceScorer + Sync),
        config: &'a ModelConfig,
        ref_params: &'a Parameters,
        sets: EvalSets<'a>,
        opts: EvalOptions,
    ) -> Result<Self> {
        if opts.samples_per_prefix == 0 || opts.max_new == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_prefix and max_new must be positive".into(),
            ));
        }
        if opts.sample_topk == 0 || opts.sample_topk > config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "sample_topk must lie in 1..={}, got {}",
                config.vocab_size, opts.sample_topk
            )));
        }
        if sets.heldout_groups.is_empty()
            || sets.kl_prefixes.is_empty()
            || sets.winrate_pairs.is_empty()
        {
            return Err(Error::InvalidConfig(
                "evaluator needs non-empty held-out groups, KL prefixes, and win-rate pairs"
                    .into(),
            ));
        }
        let ref_group_logprobs = map_indexed(
            sets.heldout_groups.len(),
            worker_threads(),
            |i| -> Result<Vec<f64>> {
                let group = &sets.heldout_groups[i];
                group.validate()?;
                group
                    .candidates
                    .iter()
                    .map(|cand| sequence_logprob(ref_params, config, &group.prefix, cand))
                    .collect()
            },
        )
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(Self {
            oracle,
            config,
            sets,
            opts,
            ref_group_logprobs,
        })
    }

    pub fn options(&self) -> &EvalOptions {
        &self.opts
    }

    /// Scores one parameter vector on every metric.
    pub fn evaluate(&self, params: &Parameters, step: u64, train_loss: f64) -> Result<MetricsRecord> {
        let q = TransformerPolicy::new(params, self.config, self.opts.sample_topk);
        let reverse_kl = reverse_kl_surrogate(
            &q,
            self.oracle,
            self.sets.kl_prefixes,
            self.opts.samples_per_prefix,
            self.opts.max_new,
            self.opts.seed,
        )?;

        // One greedy generation per win-rate prefix feeds both the judge
        // comparison and the length-norm NLL.
        let gens = map_indexed(
            self.sets.winrate_pairs.len(),
            worker_threads(),
            |i| -> Result<TokenSequence> {
                sample_topk(
                    params,
                    self.config,
                    &self.sets.winrate_pairs[i].0,
                    1,
                    self.opts.max_new,
                    derive_seed(self.opts.seed, Stream::Eval, i as u64),
                )
            },
        )
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut nll_items = Vec::with_capacity(gens.len());
        let mut won = 0usize;
        for ((prefix, gt), generation) in self.sets.winrate_pairs.iter().zip(&gens) {
            let gen_score = -self.oracle.log_prob(prefix, generation)? / generation.len() as f64;
            let gt_score = -self.oracle.log_prob(prefix, gt)? / gt.len() as f64;
            if gen_score < gt_score {
                won += 1;
            }
            nll_items.push((prefix.clone(), vec![generation.clone()]));
        }
        let win_rate = won as f64 / self.sets.winrate_pairs.len() as f64;
        let length_norm = length_norm_nll(self.oracle, &nll_items)?;

        let tops = map_indexed(
            self.sets.heldout_groups.len(),
            worker_threads(),
            |i| -> Result<bool> {
                let group = &self.sets.heldout_groups[i];
                let ref_lps = &self.ref_group_logprobs[i];
                let mut gt_ratio = 0.0;
                for (j, cand) in group.candidates.iter().enumerate() {
                    let ratio =
                        sequence_logprob(params, self.config, &group.prefix, cand)? - ref_lps[j];
                    if j == 0 {
                        gt_ratio = ratio;
                    } else if ratio >= gt_ratio {
                        return Ok(false);
                    }
                }
                Ok(true)
            },
        );
        let mut top1 = 0usize;
        for t in tops {
            if t? {
                top1 += 1;
            }
        }
        let gt_top1 = top1 as f64 / self.sets.heldout_groups.len() as f64;

        let record = MetricsRecord {
            step,
            train_loss,
            reverse_kl,
            length_norm_nll: length_norm,
            gt_top1_rate: gt_top1,
            win_rate,
        };
        record.validate()?;
        Ok(record)
    }
}

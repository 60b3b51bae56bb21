//! The optimization loop and the end-to-end experiment recipe.
//!
//! Training is deterministic per seed: data order comes from seeded epoch
//! shuffles, negative groups from per-(step, anchor) derived seeds, and the
//! optimizer from plain AdamW with decoupled weight decay. A run is
//!
//! ```text
//! MLE phase:   theta_ref   <- argmin  (1/N) sum -log pi(y|x)        (2000 steps)
//! CPO phase:   theta_cpo   <- argmin  (1/B) sum L_CPO(group; beta)  (500 steps, pi_ref frozen)
//! baseline:    theta_mle+  <- MLE continued for the same 500 steps
//! ensemble:    theta_alpha = alpha * theta_mle+ + (1-alpha) * theta_cpo
//! ```
//!
//! with every phase checkpointed and evaluated on held-out data drawn from
//! the exact synthetic generator.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    interpolate_parameters, write_metrics, EnsembleSpec, EvalOptions, EvalSets, Evaluator,
    MetricsRecord,
};
use crate::markov::{MarkovGenerator, MarkovSpec};
use crate::model::{
    forward_logits, init_parameters, loss_backward, save_checkpoint, LossTerm, ModelConfig,
    Parameters,
};
use crate::negatives::{assemble_group, NegativeSamplerConfig, PreferenceGroup};
use crate::objectives::{
    cpo_loss, cpo_loss_grad, cpo_ranked_loss, cpo_ranked_loss_grad, dpo_pair_loss,
    dpo_pair_loss_grad, CPOConfig, LogRatioGroup,
};
use crate::optim::{optimizer_step, AdamHyper, AdamState};
use crate::parallel::{map_indexed, worker_threads};
use crate::ranking::{embed_from_trace, rank_by_similarity};
use crate::seeding::{derive_seed, stream_rng, Stream};
use crate::tokens::TokenSequence;

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "DPO")]
    Dpo,
    #[serde(rename = "CPO")]
    Cpo,
    #[serde(rename = "CPO_RANKED")]
    CpoRanked,
}

impl Objective {
    /// Preference objectives contrast against a frozen reference model.
    pub fn needs_reference(self) -> bool {
        self != Objective::Mle
    }
}

fn default_lr() -> f64 {
    1e-5
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_batch_size() -> usize {
    64
}

/// One training phase. JSON field names are stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub steps: u64,
    pub objective: Objective,
    #[serde(default)]
    pub cpo: CPOConfig,
    #[serde(default)]
    pub sampler: NegativeSamplerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        match self.objective {
            Objective::Mle => Ok(()),
            Objective::Dpo => {
                self.sampler.validate()?;
                if self.sampler.mix.total() != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "DPO contrasts exactly one negative, sampler mix yields {}",
                        self.sampler.mix.total()
                    )));
                }
                self.check_batch_supports_bn()
            }
            Objective::Cpo | Objective::CpoRanked => {
                self.cpo.validate()?;
                self.sampler.validate()?;
                let k = 1 + self.sampler.mix.total();
                if self.cpo.k != k {
                    return Err(Error::InvalidConfig(format!(
                        "cpo.K is {} but ground truth + mix gives {k}",
                        self.cpo.k
                    )));
                }
                let want_ranking = self.objective == Objective::CpoRanked;
                if self.cpo.use_ranking != want_ranking {
                    return Err(Error::InvalidConfig(format!(
                        "objective {:?} requires cpo.use_ranking = {want_ranking}",
                        self.objective
                    )));
                }
                self.check_batch_supports_bn()
            }
        }
    }

    // Batch negatives draw from the other batch members' continuations.
    fn check_batch_supports_bn(&self) -> Result<()> {
        if self.sampler.mix.n_bn > 0 && self.batch_size <= self.sampler.mix.n_bn {
            return Err(Error::InvalidConfig(format!(
                "{} batch negatives need batch_size > {}, got {}",
                self.sampler.mix.n_bn, self.sampler.mix.n_bn, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Result of one training phase.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: Parameters,
    /// Evaluation records (empty when no evaluator was supplied).
    pub metrics: Vec<MetricsRecord>,
    /// Batch loss at the initial parameters (step 0, before any update).
    pub first_loss: f64,
    /// Batch loss at the final parameters (computed on one extra batch).
    pub final_loss: f64,
}

// Heldout group assembly seeds must never collide with the per-step group
// seeds (step * batch_size + anchor), so they live beyond this offset.
const HELDOUT_SEED_OFFSET: u64 = 1 << 40;

struct GroupWork {
    prefix_len: usize,
    /// One policy forward trace per candidate, reused for the backward pass.
    traces: Vec<crate::model::ForwardTrace>,
    loss: f64,
    dl_dr: Vec<f64>,
}

/// Assembles the anchor's preference group, scores it under theta and the
/// frozen reference, and differentiates the configured objective with
/// respect to the per-candidate log-ratios.
fn preference_group_work(
    params: &Parameters,
    ref_params: &Parameters,
    config: &ModelConfig,
    tcfg: &TrainConfig,
    batch: &[(TokenSequence, TokenSequence)],
    anchor: usize,
    an_pool: Option<&[TokenSequence]>,
    group_seed: u64,
) -> Result<GroupWork> {
    let mut group = assemble_group(
        ref_params,
        config,
        batch,
        anchor,
        &tcfg.sampler,
        an_pool,
        group_seed,
    )?;
    let ranked = tcfg.objective == Objective::CpoRanked;

    // One reference forward per candidate supplies both its log-probability
    // and (for the ranked objective) its pooled embedding.
    let mut traces = Vec::with_capacity(group.k());
    let mut theta_lps = Vec::with_capacity(group.k());
    let mut ref_lps = Vec::with_capacity(group.k());
    let mut embeddings = Vec::with_capacity(if ranked { group.k() } else { 0 });
    for (j, cand) in group.candidates.iter().enumerate() {
        let ids = TokenSequence::concat(&group.prefix, cand)?;
        let seq = TokenSequence::new(ids)?;
        let trace = forward_logits(params, config, &seq)?;
        theta_lps.push(trace.suffix_logprob(group.prefix.len()));
        traces.push(trace);
        let ref_trace = forward_logits(ref_params, config, &seq)?;
        ref_lps.push(ref_trace.suffix_logprob(group.prefix.len()));
        if ranked {
            embeddings.push(embed_from_trace(&ref_trace, group.prefix.len(), j));
        }
    }
    if ranked {
        let ranking = rank_by_similarity(&group, &embeddings)?;
        group.ranking = Some(ranking);
    }
    let ratios = LogRatioGroup::from_logprobs(&theta_lps, &ref_lps)?;
    let beta = tcfg.cpo.beta;
    let (loss, dl_dr) = match tcfg.objective {
        Objective::Dpo => (
            dpo_pair_loss(&ratios, beta)?,
            dpo_pair_loss_grad(&ratios, beta)?,
        ),
        Objective::Cpo => (cpo_loss(&ratios, beta)?, cpo_loss_grad(&ratios, beta)?),
        Objective::CpoRanked => {
            let ranking = group
                .ranking
                .as_ref()
                .expect("rank_group attaches a ranking");
            (
                cpo_ranked_loss(&ratios, ranking, beta)?,
                cpo_ranked_loss_grad(&ratios, ranking, beta)?,
            )
        }
        Objective::Mle => unreachable!("MLE batches never build groups"),
    };
    Ok(GroupWork {
        prefix_len: group.prefix.len(),
        traces,
        loss,
        dl_dr,
    })
}

/// Token-level mean NLL of a batch and (optionally) its gradient.
fn mle_batch_loss_grad(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[(TokenSequence, TokenSequence)],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let traces = map_indexed(batch.len(), worker_threads(), |i| {
        let (prefix, cont) = &batch[i];
        let ids = TokenSequence::concat(prefix, cont)?;
        let seq = TokenSequence::new(ids)?;
        forward_logits(params, config, &seq)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let tokens: usize = batch.iter().map(|(_, c)| c.len()).sum();
    let mut loss = 0.0;
    for (trace, (prefix, _)) in traces.iter().zip(batch) {
        loss -= trace.suffix_logprob(prefix.len());
    }
    loss /= tokens as f64;
    if !with_grad {
        return Ok((loss, None));
    }
    let weight = -1.0 / tokens as f64;
    let terms: Vec<LossTerm> = traces
        .iter()
        .zip(batch)
        .map(|(trace, (prefix, _))| LossTerm {
            trace,
            prefix_len: prefix.len(),
            weight,
        })
        .collect();
    let grad = loss_backward(params, config, &terms)?;
    Ok((loss, Some(grad)))
}

/// Preference-objective counterpart of [`batch_loss_grad`]; split out so the
/// reference parameters are only demanded where they are used.
#[allow(clippy::too_many_arguments)]
fn preference_batch_loss_grad(
    params: &Parameters,
    ref_params: &Parameters,
    config: &ModelConfig,
    tcfg: &TrainConfig,
    batch: &[(TokenSequence, TokenSequence)],
    an_pools: Option<&[&[TokenSequence]]>,
    step: u64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let threads = worker_threads();
    let works = map_indexed(batch.len(), threads, |a| {
        let group_seed = derive_seed(
            tcfg.seed,
            Stream::GroupAssembly,
            step * tcfg.batch_size as u64 + a as u64,
        );
        let pool = an_pools.map(|pools| pools[a]);
        preference_group_work(params, ref_params, config, tcfg, batch, a, pool, group_seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let b = batch.len() as f64;
    let loss = works.iter().map(|w| w.loss).sum::<f64>() / b;
    if !with_grad {
        return Ok((loss, None));
    }

    // d loss / d theta_logprob_j equals d loss / d ratio_j; the forward
    // traces recorded while scoring are reduced in deterministic order.
    let mut terms = Vec::new();
    for work in &works {
        for (trace, &dl) in work.traces.iter().zip(&work.dl_dr) {
            terms.push(LossTerm {
                trace,
                prefix_len: work.prefix_len,
                weight: dl / b,
            });
        }
    }
    let grad = loss_backward(params, config, &terms)?;
    Ok((loss, Some(grad)))
}

/// Runs one training phase.
///
/// Data order is a fresh seeded shuffle per epoch; partial trailing batches
/// are dropped. `an_pools`, when given, holds one pre-generated
/// autoregressive-negative pool per corpus example (required iff the sampler
/// mix requests AN). Evaluation happens before the update at every step
/// divisible by `eval_every`, plus once at the final parameters.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &ModelConfig,
    tcfg: &TrainConfig,
    corpus: &[(TokenSequence, TokenSequence)],
    init: &Parameters,
    ref_params: Option<&Parameters>,
    an_pools: Option<&[Vec<TokenSequence>]>,
    evaluator: Option<&Evaluator>,
    eval_every: u64,
) -> Result<TrainOutput> {
    config.validate()?;
    tcfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty corpus".into()));
    }
    if corpus.len() < tcfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "corpus of {} examples cannot fill batches of {}",
            corpus.len(),
            tcfg.batch_size
        )));
    }
    let reference = match (tcfg.objective.needs_reference(), ref_params) {
        (true, None) => {
            return Err(Error::InvalidConfig(format!(
                "objective {:?} needs a frozen reference model",
                tcfg.objective
            )))
        }
        (_, r) => r,
    };
    let uses_an = tcfg.objective != Objective::Mle && tcfg.sampler.mix.n_an > 0;
    if uses_an {
        match an_pools {
            None => {
                return Err(Error::InvalidConfig(
                    "sampler mix requests autoregressive negatives but no pools were supplied"
                        .into(),
                ))
            }
            Some(pools) if pools.len() != corpus.len() => {
                return Err(Error::InvalidConfig(format!(
                    "{} AN pools for {} corpus examples",
                    pools.len(),
                    corpus.len()
                )));
            }
            Some(_) => {}
        }
    }
    if evaluator.is_some() && eval_every == 0 {
        return Err(Error::InvalidConfig(
            "eval_every must be positive when an evaluator is supplied".into(),
        ));
    }

    let mut params = init.clone();
    let mut state = AdamState::new(params.len());
    let hyper = AdamHyper::new(tcfg.lr, tcfg.weight_decay);
    hyper.validate()?;

    let batches_per_epoch = corpus.len() / tcfg.batch_size;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut current_epoch = u64::MAX;
    let mut metrics = Vec::new();
    let mut first_loss = f64::NAN;

    let batch_at = |order: &mut Vec<usize>, current_epoch: &mut u64, step: u64| {
        let epoch = step / batches_per_epoch as u64;
        if *current_epoch != epoch {
            order.sort_unstable(); // reset to a canonical base order
            let mut rng = stream_rng(tcfg.seed, Stream::Shuffle, epoch);
            order.shuffle(&mut rng);
            *current_epoch = epoch;
        }
        let slot = (step % batches_per_epoch as u64) as usize;
        let idx = &order[slot * tcfg.batch_size..(slot + 1) * tcfg.batch_size];
        let batch: Vec<(TokenSequence, TokenSequence)> =
            idx.iter().map(|&i| corpus[i].clone()).collect();
        let pools: Option<Vec<&[TokenSequence]>> = if uses_an {
            an_pools.map(|ps| idx.iter().map(|&i| ps[i].as_slice()).collect())
        } else {
            None
        };
        (batch, pools)
    };

    for step in 0..tcfg.steps {
        let (batch, pools) = batch_at(&mut order, &mut current_epoch, step);
        let (loss, grad) = match (tcfg.objective, reference) {
            (Objective::Mle, _) => mle_batch_loss_grad(&params, config, &batch, true)?,
            (_, Some(r)) => preference_batch_loss_grad(
                &params,
                r,
                config,
                tcfg,
                &batch,
                pools.as_deref(),
                step,
                true,
            )?,
            (_, None) => unreachable!("validated above"),
        };
        if step == 0 {
            first_loss = loss;
        }
        if let Some(ev) = evaluator {
            if step % eval_every == 0 {
                metrics.push(ev.evaluate(&params, step, loss)?);
            }
        }
        let grad = grad.expect("with_grad = true always yields a gradient");
        optimizer_step(&mut params, &grad, &mut state, &hyper)?;
    }

    // Loss at the final parameters, on the next batch in the schedule.
    let (batch, pools) = batch_at(&mut order, &mut current_epoch, tcfg.steps);
    let (final_loss, _) = match (tcfg.objective, reference) {
        (Objective::Mle, _) => mle_batch_loss_grad(&params, config, &batch, false)?,
        (_, Some(r)) => preference_batch_loss_grad(
            &params,
            r,
            config,
            tcfg,
            &batch,
            pools.as_deref(),
            tcfg.steps,
            false,
        )?,
        (_, None) => unreachable!("validated above"),
    };
    if let Some(ev) = evaluator {
        metrics.push(ev.evaluate(&params, tcfg.steps, final_loss)?);
    }

    Ok(TrainOutput {
        params,
        metrics,
        first_loss,
        final_loss,
    })
}

fn default_n_pairs() -> usize {
    5000
}
fn default_n_heldout_groups() -> usize {
    500
}
fn default_n_eval_pairs() -> usize {
    200
}
fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9]
}
fn default_eval_every() -> u64 {
    100
}

/// Everything an end-to-end experiment needs: corpus source, both training
/// phases, the ensemble sweep, and the evaluation budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub markov: MarkovSpec,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    pub mle: TrainConfig,
    pub cpo: TrainConfig,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_n_heldout_groups")]
    pub n_heldout_groups: usize,
    #[serde(default = "default_n_eval_pairs")]
    pub n_eval_pairs: usize,
    pub eval: EvalOptions,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    /// The desk-scale recipe: order-2 Markov corpus of 5000 pairs over 64
    /// tokens, 2000 MLE steps, then 500 steps of ranked CPO against a
    /// (3 BN, 5 MN, 3 TN) mix at beta = 5, with 500 held-out groups.
    /// Learning rates are desk-tuned: the published 1e-5 moves a 112k-f64
    /// model imperceptibly, so both phases run at 1e-3.
    pub fn desk(seed: u64) -> Self {
        let sampler = NegativeSamplerConfig {
            topk: 50,
            swap_fraction: 0.15,
            mix: crate::negatives::MixCounts {
                n_bn: 3,
                n_mn: 5,
                n_tn: 3,
                n_an: 0,
            },
            seed,
        };
        ExperimentSpec {
            model: ModelConfig {
                vocab_size: 64,
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                max_context: 64,
            },
            markov: MarkovSpec {
                vocab_size: 64,
                eos_hazard: 0.15,
                smoothing: 0.08,
                fan_out: 6,
                prefix_len: 6,
                max_cont: 16,
                seed,
            },
            n_pairs: 5000,
            mle: TrainConfig {
                lr: 1e-3,
                weight_decay: 0.05,
                batch_size: 16,
                steps: 2000,
                objective: Objective::Mle,
                cpo: CPOConfig::default(),
                sampler: NegativeSamplerConfig::default(),
                seed,
            },
            cpo: TrainConfig {
                lr: 1e-3,
                weight_decay: 0.05,
                batch_size: 16,
                steps: 500,
                objective: Objective::CpoRanked,
                cpo: CPOConfig {
                    beta: 5.0,
                    k: 12,
                    use_ranking: true,
                },
                sampler,
                seed,
            },
            alphas: default_alphas(),
            n_heldout_groups: 500,
            n_eval_pairs: 150,
            eval: EvalOptions {
                samples_per_prefix: 4,
                sample_topk: 50,
                max_new: 20,
                seed,
            },
            eval_every: 250,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.markov.validate()?;
        if self.markov.vocab_size != self.model.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "corpus vocabulary {} does not match model vocabulary {}",
                self.markov.vocab_size, self.model.vocab_size
            )));
        }
        if self.mle.objective != Objective::Mle {
            return Err(Error::InvalidConfig(
                "the first phase must train with the MLE objective".into(),
            ));
        }
        if !self.cpo.objective.needs_reference() {
            return Err(Error::InvalidConfig(
                "the second phase must train a preference objective".into(),
            ));
        }
        self.mle.validate()?;
        self.cpo.validate()?;
        for &alpha in &self.alphas {
            if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
                return Err(Error::InvalidConfig(format!(
                    "sweep alpha {alpha} outside [0, 1]"
                )));
            }
        }
        if self.n_pairs < self.mle.batch_size.max(self.cpo.batch_size) {
            return Err(Error::InvalidConfig(
                "corpus smaller than one batch".into(),
            ));
        }
        if self.n_heldout_groups == 0 || self.n_eval_pairs == 0 {
            return Err(Error::InvalidConfig(
                "held-out group and eval pair counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Artifacts of [`run_experiment`], with final-step records surfaced for
/// direct assertions.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub cpo_final: MetricsRecord,
    pub baseline_final: MetricsRecord,
    pub sweep_finals: Vec<(f64, MetricsRecord)>,
    pub metric_files: Vec<PathBuf>,
    pub checkpoint_files: Vec<PathBuf>,
}

/// Builds the held-out preference groups once, from the frozen reference,
/// so every evaluated model sees identical candidates.
pub fn build_heldout_groups(
    ref_params: &Parameters,
    config: &ModelConfig,
    pairs: &[(TokenSequence, TokenSequence)],
    scfg: &NegativeSamplerConfig,
    an_pools: Option<&[Vec<TokenSequence>]>,
    seed: u64,
) -> Result<Vec<PreferenceGroup>> {
    map_indexed(pairs.len(), worker_threads(), |i| {
        let pool = an_pools.map(|ps| ps[i].as_slice());
        assemble_group(
            ref_params,
            config,
            pairs,
            i,
            scfg,
            pool,
            derive_seed(seed, Stream::GroupAssembly, HELDOUT_SEED_OFFSET + i as u64),
        )
    })
    .into_iter()
    .collect()
}

/// Pre-generates one autoregressive-negative pool per example by sampling
/// the frozen reference with the sampler's top-k cutoff.
pub fn build_an_pools(
    ref_params: &Parameters,
    config: &ModelConfig,
    pairs: &[(TokenSequence, TokenSequence)],
    scfg: &NegativeSamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<TokenSequence>>> {
    map_indexed(pairs.len(), worker_threads(), |i| {
        let mut cfg = scfg.clone();
        cfg.seed = derive_seed(seed, Stream::Autoregressive, i as u64);
        crate::negatives::gen_autoregressive(
            ref_params,
            config,
            &pairs[i].0,
            scfg.mix.n_an,
            &cfg,
        )
    })
    .into_iter()
    .collect()
}

fn metrics_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("metrics_{name}.jsonl"))
}

/// Runs the full recipe: corpus generation, MLE reference, CPO fine-tune,
/// MLE-continued baseline, and the ensemble sweep. Emits one metrics file
/// per sweep point plus one each for the CPO and baseline runs (|sweep|+2
/// total) and a checkpoint per trained or interpolated model.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let oracle = MarkovGenerator::new(spec.markov)?;

    let corpus = oracle.sample_pairs(spec.n_pairs, derive_seed(spec.seed, Stream::Corpus, 0))?;
    let heldout_pairs =
        oracle.sample_pairs(spec.n_heldout_groups, derive_seed(spec.seed, Stream::Corpus, 1))?;
    let eval_pairs =
        oracle.sample_pairs(spec.n_eval_pairs, derive_seed(spec.seed, Stream::Corpus, 2))?;

    let init = init_parameters(&spec.model, derive_seed(spec.seed, Stream::Init, 0))?;

    log::info!("MLE reference phase: {} steps", spec.mle.steps);
    let mle_out = train(&spec.model, &spec.mle, &corpus, &init, None, None, None, 0)?;
    let ref_params = mle_out.params;
    let ref_ckpt = out_dir.join("reference_mle.ckpt");
    save_checkpoint(&ref_ckpt, &spec.model, &ref_params)?;

    // Pools and held-out groups derive from the frozen reference.
    let uses_an = spec.cpo.sampler.mix.n_an > 0;
    let corpus_pools = if uses_an {
        Some(build_an_pools(
            &ref_params,
            &spec.model,
            &corpus,
            &spec.cpo.sampler,
            derive_seed(spec.seed, Stream::Autoregressive, 0),
        )?)
    } else {
        None
    };
    let heldout_pools = if uses_an {
        Some(build_an_pools(
            &ref_params,
            &spec.model,
            &heldout_pairs,
            &spec.cpo.sampler,
            derive_seed(spec.seed, Stream::Autoregressive, 1),
        )?)
    } else {
        None
    };
    let heldout_groups = build_heldout_groups(
        &ref_params,
        &spec.model,
        &heldout_pairs,
        &spec.cpo.sampler,
        heldout_pools.as_deref(),
        spec.seed,
    )?;

    let kl_prefixes: Vec<TokenSequence> = eval_pairs.iter().map(|(p, _)| p.clone()).collect();
    let sets = EvalSets {
        heldout_groups: &heldout_groups,
        kl_prefixes: &kl_prefixes,
        winrate_pairs: &eval_pairs,
    };
    let evaluator = Evaluator::new(&oracle, &spec.model, &ref_params, sets, spec.eval)?;

    log::info!("CPO phase: {} steps", spec.cpo.steps);
    let cpo_out = train(
        &spec.model,
        &spec.cpo,
        &corpus,
        &ref_params,
        Some(&ref_params),
        corpus_pools.as_deref(),
        Some(&evaluator),
        spec.eval_every,
    )?;

    // The baseline mirrors the paper's MLE-continued model: same step count,
    // fresh seeded data order (the true continuation order is unknowable).
    let baseline_cfg = TrainConfig {
        steps: spec.cpo.steps,
        seed: derive_seed(spec.mle.seed, Stream::Shuffle, 1),
        ..spec.mle.clone()
    };
    log::info!("MLE-continued baseline: {} steps", baseline_cfg.steps);
    let baseline_out = train(
        &spec.model,
        &baseline_cfg,
        &corpus,
        &ref_params,
        None,
        None,
        Some(&evaluator),
        spec.eval_every,
    )?;

    let mut metric_files = Vec::new();
    let mut checkpoint_files = Vec::new();

    let cpo_ckpt = out_dir.join("cpo.ckpt");
    save_checkpoint(&cpo_ckpt, &spec.model, &cpo_out.params)?;
    let cpo_metrics = metrics_path(out_dir, "cpo");
    write_metrics(&cpo_metrics, &cpo_out.metrics)?;

    let baseline_ckpt = out_dir.join("mle_continued.ckpt");
    save_checkpoint(&baseline_ckpt, &spec.model, &baseline_out.params)?;
    let baseline_metrics = metrics_path(out_dir, "mle_continued");
    write_metrics(&baseline_metrics, &baseline_out.metrics)?;

    metric_files.push(cpo_metrics);
    metric_files.push(baseline_metrics);
    checkpoint_files.push(ref_ckpt);
    checkpoint_files.push(cpo_ckpt);
    checkpoint_files.push(baseline_ckpt);

    // Sweep records carry train_loss 0: no training step happens at an
    // interpolated point.
    let mut sweep_finals = Vec::with_capacity(spec.alphas.len());
    for &alpha in &spec.alphas {
        let blended = interpolate_parameters(&EnsembleSpec {
            alpha,
            theta_mle: &baseline_out.params,
            theta_cpo: &cpo_out.params,
        })?;
        let record = evaluator.evaluate(&blended, spec.cpo.steps, 0.0)?;
        let tag = format!("alpha_{alpha:.2}");
        let ckpt = out_dir.join(format!("ensemble_{tag}.ckpt"));
        save_checkpoint(&ckpt, &spec.model, &blended)?;
        let mfile = metrics_path(out_dir, &tag);
        write_metrics(&mfile, &[record])?;
        metric_files.push(mfile);
        checkpoint_files.push(ckpt);
        sweep_finals.push((alpha, record));
    }

    let cpo_final = *cpo_out
        .metrics
        .last()
        .expect("CPO phase ran with an evaluator");
    let baseline_final = *baseline_out
        .metrics
        .last()
        .expect("baseline ran with an evaluator");
    Ok(ExperimentOutput {
        cpo_final,
        baseline_final,
        sweep_finals,
        metric_files,
        checkpoint_files,
    })
}

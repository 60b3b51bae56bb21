//! Finite-difference verification of the analytic gradients.
//!
//! Every loss in the crate is differentiated by hand, so each objective is
//! checked against central finite differences on a small-but-real model:
//!
//! ```text
//! fd_i = (L(theta + h e_i) - L(theta - h e_i)) / (2h)
//! rel_i = |fd_i - g_i| / max(|fd_i|, |g_i|, floor)
//! ```
//!
//! The floor keeps coordinates whose true gradient is ~0 (where the central
//! difference is pure f64 roundoff, about 1e-11 at these loss scales) from
//! reporting meaningless relative errors; any real differentiation bug shows
//! up orders of magnitude above it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    forward_logits, init_parameters, loss_backward, LossTerm, ModelConfig, Parameters,
};
use crate::objectives::{
    cpo_loss, cpo_loss_grad, cpo_ranked_loss, cpo_ranked_loss_grad, dpo_pair_loss,
    dpo_pair_loss_grad, LogRatioGroup, Ranking,
};
use crate::seeding::{stream_rng, Stream};
use crate::tokens::{TokenSequence, EOS};

/// Outcome of one objective's finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub objective: &'static str,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub n_params: usize,
}

// Denominator floor for the relative error (see module docs).
const REL_FLOOR: f64 = 1e-4;

fn rel_err(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(REL_FLOOR)
}

struct Fixture {
    config: ModelConfig,
    params: Parameters,
    /// (prefix, continuation) pairs; the MLE batch uses all of them, the
    /// group objectives treat pair 0 as ground truth and the rest as
    /// negatives.
    pairs: Vec<(TokenSequence, TokenSequence)>,
    /// Frozen reference log-probabilities per pair (constant in theta).
    ref_lps: Vec<f64>,
    ranking: Ranking,
    beta: f64,
}

fn random_sequence(rng: &mut impl Rng, vocab: usize, len: usize, terminate: bool) -> TokenSequence {
    let mut ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
    if terminate {
        ids.push(EOS);
    }
    TokenSequence::new(ids).expect("bodies have no EOS")
}

fn build_fixture(seed: u64, k: usize) -> Result<Fixture> {
    let config = ModelConfig {
        vocab_size: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_context: 24,
    };
    let params = init_parameters(&config, seed)?;
    let ref_params = init_parameters(&config, seed ^ 0x5eed)?;
    let mut rng = stream_rng(seed, Stream::Perturb, 17);
    let prefix = random_sequence(&mut rng, config.vocab_size, 3, false);
    let pairs: Vec<(TokenSequence, TokenSequence)> = (0..k)
        .map(|_| {
            let cont_len = rng.gen_range(3..7);
            (
                prefix.clone(),
                random_sequence(&mut rng, config.vocab_size, cont_len, true),
            )
        })
        .collect();
    let ref_lps = pairs
        .iter()
        .map(|(p, c)| crate::model::sequence_logprob(&ref_params, &config, p, c))
        .collect::<Result<Vec<f64>>>()?;
    // Any fixed permutation works: the ranking must only be constant in theta.
    let mut tau: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..=i);
        tau.swap(i, j);
    }
    let ranking = Ranking::new(tau)?;
    Ok(Fixture {
        config,
        params,
        pairs,
        ref_lps,
        ranking,
        beta: 2.5,
    })
}

/// Which loss a fixture evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loss {
    Mle,
    DpoPair,
    Cpo,
    CpoRanked,
}

impl Loss {
    fn name(self) -> &'static str {
        match self {
            Loss::Mle => "mle_loss",
            Loss::DpoPair => "dpo_pair_loss",
            Loss::Cpo => "cpo_loss",
            Loss::CpoRanked => "cpo_ranked_loss",
        }
    }

    fn group_size(self) -> usize {
        match self {
            Loss::Mle => 3,
            Loss::DpoPair => 2,
            Loss::Cpo | Loss::CpoRanked => 4,
        }
    }
}

fn theta_logprobs(fix: &Fixture, params: &Parameters) -> Result<Vec<f64>> {
    fix.pairs
        .iter()
        .map(|(p, c)| crate::model::sequence_logprob(params, &fix.config, p, c))
        .collect()
}

fn loss_value(fix: &Fixture, loss: Loss, params: &Parameters) -> Result<f64> {
    match loss {
        Loss::Mle => {
            let tokens: usize = fix.pairs.iter().map(|(_, c)| c.len()).sum();
            let total: f64 = theta_logprobs(fix, params)?.iter().sum();
            Ok(-total / tokens as f64)
        }
        _ => {
            let group = LogRatioGroup::from_logprobs(&theta_logprobs(fix, params)?, &fix.ref_lps)?;
            match loss {
                Loss::DpoPair => dpo_pair_loss(&group, fix.beta),
                Loss::Cpo => cpo_loss(&group, fix.beta),
                Loss::CpoRanked => cpo_ranked_loss(&group, &fix.ranking, fix.beta),
                Loss::Mle => unreachable!(),
            }
        }
    }
}

fn loss_gradient(fix: &Fixture, loss: Loss) -> Result<Vec<f64>> {
    let weights: Vec<f64> = match loss {
        Loss::Mle => {
            let tokens: usize = fix.pairs.iter().map(|(_, c)| c.len()).sum();
            vec![-1.0 / tokens as f64; fix.pairs.len()]
        }
        _ => {
            let group =
                LogRatioGroup::from_logprobs(&theta_logprobs(fix, &fix.params)?, &fix.ref_lps)?;
            match loss {
                Loss::DpoPair => dpo_pair_loss_grad(&group, fix.beta)?,
                Loss::Cpo => cpo_loss_grad(&group, fix.beta)?,
                Loss::CpoRanked => cpo_ranked_loss_grad(&group, &fix.ranking, fix.beta)?,
                Loss::Mle => unreachable!(),
            }
        }
    };
    let traces = fix
        .pairs
        .iter()
        .map(|(p, c)| {
            let ids = TokenSequence::concat(p, c)?;
            forward_logits(&fix.params, &fix.config, &TokenSequence::new(ids)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let terms: Vec<LossTerm> = traces
        .iter()
        .zip(fix.pairs.iter().zip(&weights))
        .map(|(trace, ((p, _), &weight))| LossTerm {
            trace,
            prefix_len: p.len(),
            weight,
        })
        .collect();
    loss_backward(&fix.params, &fix.config, &terms)
}

/// Checks one objective's analytic gradient against central differences on
/// `coords` distinct random coordinates. `h` is the half-step.
fn check_one(seed: u64, loss: Loss, coords: usize, h: f64) -> Result<GradCheckReport> {
    let fix = build_fixture(seed, loss.group_size())?;
    let grad = loss_gradient(&fix, loss)?;
    let n = fix.params.len();
    if coords > n {
        return Err(Error::InvalidConfig(format!(
            "cannot draw {coords} distinct coordinates from {n} parameters"
        )));
    }
    // Partial Fisher-Yates over the coordinate indices.
    let mut rng = stream_rng(seed, Stream::Perturb, loss as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..coords {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = idx[0];
    let mut perturbed = fix.params.clone();
    for &c in &idx[..coords] {
        let base = fix.params.flat()[c];
        perturbed.flat_mut()[c] = base + h;
        let plus = loss_value(&fix, loss, &perturbed)?;
        perturbed.flat_mut()[c] = base - h;
        let minus = loss_value(&fix, loss, &perturbed)?;
        perturbed.flat_mut()[c] = base;
        let fd = (plus - minus) / (2.0 * h);
        let rel = rel_err(fd, grad[c]);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = c;
        }
    }
    Ok(GradCheckReport {
        objective: loss.name(),
        coords_checked: coords,
        max_rel_err,
        worst_coord,
        n_params: n,
    })
}

/// Runs the full gradient suite: every objective on a >= 500-parameter
/// model, `coords` random coordinates each, central differences with
/// half-step `h`.
pub fn finite_difference_suite(seed: u64, coords: usize, h: f64) -> Result<Vec<GradCheckReport>> {
    if coords == 0 || !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidConfig(
            "gradient check needs coords >= 1 and h > 0".into(),
        ));
    }
    [Loss::Mle, Loss::DpoPair, Loss::Cpo, Loss::CpoRanked]
        .into_iter()
        .map(|loss| check_one(seed, loss, coords, h))
        .collect()
}

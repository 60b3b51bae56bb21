//! Training objectives over policy/reference log-ratios.
//!
//! Every loss here is a scalar to *minimize*. The contrastive losses act on
//! a [`LogRatioGroup`]: for candidate `j` of a group,
//!
//! ```text
//! r_j = log pi_theta(y_j | x) - log pi_ref(y_j | x)
//! ```
//!
//! with index 0 always the ground-truth continuation. With `z_j = beta r_j`:
//!
//! ```text
//! pairwise      L = ln(1 + exp(-(z_0 - z_1)))                    (K = 2)
//! contrastive   L = lse(z) - z_0                                 (K >= 2)
//! ranked        L = sum_k [ lse(z[tau_k..]) - z[tau_k] ]         (stages)
//! ```
//!
//! where `tau` ranks candidates best-first and stage `k` removes the `k`
//! best candidates already placed. The pairwise loss is the `K = 2` special
//! case of the contrastive one, and the ranked loss with `K = 2` reduces to
//! it as well; unit and acceptance tests pin those identities to within
//! accumulated rounding. All log-sum-exp evaluations subtract the row
//! maximum first.
//!
//! The reference policy is frozen: ratios enter as plain numbers and no
//! gradient ever flows through `log pi_ref`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sequence_logprob, ModelConfig, Parameters};
use crate::tokens::TokenSequence;

/// Hyper-parameters of the contrastive objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CPOConfig {
    /// Inverse temperature on the log-ratios. Positive.
    pub beta: f64,
    /// Group size: ground truth plus negatives.
    #[serde(rename = "K")]
    pub k: usize,
    /// Rank negatives by embedding similarity (stagewise loss) instead of
    /// treating them as an unordered set.
    pub use_ranking: bool,
}

impl Default for CPOConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            k: 12,
            use_ranking: false,
        }
    }
}

impl CPOConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "group size K must be at least 2, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Log-ratios of one preference group; entry 0 is the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioGroup {
    ratios: Vec<f64>,
}

impl LogRatioGroup {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        if ratios.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a ratio group needs at least 2 entries, got {}",
                ratios.len()
            )));
        }
        if let Some(bad) = ratios.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite log-ratio {bad}"
            )));
        }
        Ok(Self { ratios })
    }

    /// Builds ratios from parallel per-candidate log-probabilities.
    pub fn from_logprobs(theta: &[f64], reference: &[f64]) -> Result<Self> {
        if theta.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} policy log-probs vs {} reference log-probs",
                theta.len(),
                reference.len()
            )));
        }
        Self::new(theta.iter().zip(reference).map(|(t, r)| t - r).collect())
    }

    pub fn k(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }
}

/// A best-first ordering of group candidates: `tau[0]` is the index of the
/// best candidate, `tau[k]` the index ranked `k`-th. Always a permutation
/// of `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    tau: Vec<usize>,
}

impl Ranking {
    pub fn new(tau: Vec<usize>) -> Result<Self> {
        let k = tau.len();
        if k < 2 {
            return Err(Error::InvalidRanking(format!(
                "ranking needs at least 2 entries, got {k}"
            )));
        }
        let mut seen = vec![false; k];
        for &i in &tau {
            if i >= k || seen[i] {
                return Err(Error::InvalidRanking(format!(
                    "{tau:?} is not a permutation of 0..{k}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { tau })
    }

    /// The identity ordering (candidate order = preference order).
    pub fn identity(k: usize) -> Result<Self> {
        Self::new((0..k).collect())
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn k(&self) -> usize {
        self.tau.len()
    }
}

fn lse(zs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = zs.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = zs.map(|z| (z - m).exp()).sum();
    m + s.ln()
}

/// Mean token-level negative log-likelihood of the continuations given
/// their prefixes: `(1/N) sum_i -log pi(cont_i | prefix_i)` with `N` the
/// total number of continuation tokens (EOS included).
pub fn mle_loss(
    params: &Parameters,
    config: &ModelConfig,
    batch: &[(TokenSequence, TokenSequence)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (prefix, cont) in batch {
        total -= sequence_logprob(params, config, prefix, cont)?;
        tokens += cont.len();
    }
    Ok(total / tokens as f64)
}

/// Pairwise preference loss `ln(1 + exp(-beta (r_w - r_l)))` for a group of
/// exactly two ratios (winner first).
pub fn dpo_pair_loss(group: &LogRatioGroup, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if group.k() != 2 {
        return Err(Error::InvalidConfig(format!(
            "pairwise loss needs exactly 2 candidates, got {}",
            group.k()
        )));
    }
    let t = beta * (group.ratios[1] - group.ratios[0]);
    Ok(softplus(t))
}

/// `d loss / d ratios` of [`dpo_pair_loss`].
pub fn dpo_pair_loss_grad(group: &LogRatioGroup, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    if group.k() != 2 {
        return Err(Error::InvalidConfig(format!(
            "pairwise loss needs exactly 2 candidates, got {}",
            group.k()
        )));
    }
    let s = sigmoid(beta * (group.ratios[1] - group.ratios[0]));
    Ok(vec![-beta * s, beta * s])
}

/// Unranked contrastive loss `lse(beta r) - beta r_0`: the negative
/// log-probability that the ground truth wins a softmax over the group.
pub fn cpo_loss(group: &LogRatioGroup, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let z = group.ratios.iter().map(|&r| beta * r);
    Ok(lse(z.clone()) - beta * group.ratios[0])
}

/// `d loss / d ratios` of [`cpo_loss`]: `beta (softmax(beta r) - e_0)`.
pub fn cpo_loss_grad(group: &LogRatioGroup, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let mut g = softmax_scaled(&group.ratios, beta);
    for x in g.iter_mut() {
        *x *= beta;
    }
    g[0] -= beta;
    Ok(g)
}

/// Ranked (stagewise) contrastive loss. Stage `k` scores the rank-`k`
/// candidate against everything ranked at or below it:
///
/// ```text
/// L = sum_{k=0}^{K-2} [ lse(beta r over tau[k..]) - beta r_{tau[k]} ]
/// ```
///
/// The last stage is a softmax over one element and contributes exactly 0,
/// so it is skipped. Stages are summed within a group; averaging across
/// groups is the trainer's job.
pub fn cpo_ranked_loss(group: &LogRatioGroup, ranking: &Ranking, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    check_ranking(group, ranking)?;
    let tau = ranking.tau();
    let mut loss = 0.0;
    for k in 0..tau.len() - 1 {
        let stage = tau[k..].iter().map(|&j| beta * group.ratios[j]);
        loss += lse(stage) - beta * group.ratios[tau[k]];
    }
    Ok(loss)
}

/// `d loss / d ratios` of [`cpo_ranked_loss`].
pub fn cpo_ranked_loss_grad(
    group: &LogRatioGroup,
    ranking: &Ranking,
    beta: f64,
) -> Result<Vec<f64>> {
    check_beta(beta)?;
    check_ranking(group, ranking)?;
    let tau = ranking.tau();
    let mut grad = vec![0.0; group.k()];
    for k in 0..tau.len() - 1 {
        let zs: Vec<f64> = tau[k..].iter().map(|&j| beta * group.ratios[j]).collect();
        let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = zs.iter().map(|&z| (z - m).exp()).sum();
        for (&j, &z) in tau[k..].iter().zip(zs.iter()) {
            grad[j] += beta * (z - m).exp() / z_sum;
        }
        grad[tau[k]] -= beta;
    }
    Ok(grad)
}

/// Listwise preference loss over an externally supplied ranking. The scalar
/// map coincides with [`cpo_ranked_loss`]; the two names exist because the
/// ranked group can come either from embedding similarity or from given
/// preference data, and call sites read better when they say which.
pub fn plackett_luce_dpo_loss(
    group: &LogRatioGroup,
    ranking: &Ranking,
    beta: f64,
) -> Result<f64> {
    cpo_ranked_loss(group, ranking, beta)
}

/// Reward implied by a policy/reference pair at one sequence:
/// `beta (log pi_theta - log pi_ref)`, unique up to a per-prefix constant.
pub fn implicit_reward(theta_logprob: f64, ref_logprob: f64, beta: f64) -> f64 {
    beta * (theta_logprob - ref_logprob)
}

/// Probability that each candidate is the best of the group under a softmax
/// over rewards. Invariant to adding a constant to every reward, which is
/// why partition-function terms cancel out of group objectives.
pub fn best_of_k_prob(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidConfig("empty reward vector".into()));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite reward {bad}")));
    }
    Ok(softmax_scaled(rewards, 1.0))
}

fn softmax_scaled(xs: &[f64], scale: f64) -> Vec<f64> {
    let m = xs.iter().map(|&x| scale * x).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (scale * x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `ln(1 + e^t)` without overflow on either tail.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (1.0 + (-t.abs()).exp()).ln()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(())
}

fn check_ranking(group: &LogRatioGroup, ranking: &Ranking) -> Result<()> {
    if ranking.k() != group.k() {
        return Err(Error::InvalidRanking(format!(
            "ranking over {} candidates applied to a group of {}",
            ranking.k(),
            group.k()
        )));
    }
    Ok(())
}

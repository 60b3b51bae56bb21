//! Brute-force check of the KL-regularised reward objective and its
//! closed-form optimum on enumerable toy spaces.
//!
//! For a reward `r` and reference policy `rho` over an enumerated support,
//! the regularised objective and its maximiser are
//!
//! ```text
//! J(pi)   = sum_y pi(y) r(y) - beta * sum_y pi(y) ln(pi(y) / rho(y))
//! pi*(y)  = rho(y) exp(r(y) / beta) / Z
//! Z       = sum_y rho(y) exp(r(y) / beta)
//! J(pi*)  = beta * ln Z
//! ```
//!
//! Everything here is exact tabular probability: the support enumerates all
//! EOS-terminated continuations up to a length cap, and the non-terminated
//! length-cap sequences are kept as probability buckets so the total mass is
//! exactly 1 and no probability leaks out of the table.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::{forward_ids, ModelConfig, Parameters};
use crate::seeding::{stream_rng, Stream};
use crate::tokens::{TokenSequence, EOS};

/// One continuation in an enumerated support: either EOS-terminated or a
/// length-cap tail bucket (no EOS anywhere).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportElement {
    pub ids: Vec<usize>,
    pub terminated: bool,
}

impl SupportElement {
    fn validate(&self) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::InvalidSequence("empty support element".into()));
        }
        let interior_eos = self.ids[..self.ids.len() - 1].contains(&EOS);
        let ends_eos = *self.ids.last().expect("non-empty") == EOS;
        if interior_eos {
            return Err(Error::InvalidSequence(format!(
                "interior EOS in support element {:?}",
                self.ids
            )));
        }
        if self.terminated != ends_eos {
            return Err(Error::InvalidSequence(format!(
                "termination flag {} disagrees with ids {:?}",
                self.terminated, self.ids
            )));
        }
        Ok(())
    }
}

/// A distribution given as an explicit table over a continuation support.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPolicy {
    support: Vec<SupportElement>,
    probs: Vec<f64>,
}

impl EnumeratedPolicy {
    pub fn new(support: Vec<SupportElement>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} support elements but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::InvalidConfig("empty support".into()));
        }
        for elem in &support {
            elem.validate()?;
        }
        if let Some(&bad) = probs.iter().find(|&&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "probabilities must be finite and non-negative, got {bad}"
            )));
        }
        let mass = kahan_sum(probs.iter().copied());
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::MassDeficit {
                which: "enumerated policy",
                mass,
            });
        }
        Ok(Self { support, probs })
    }

    pub fn support(&self) -> &[SupportElement] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn same_support(&self, other: &EnumeratedPolicy) -> bool {
        self.support == other.support
    }
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

fn lse_slice(zs: &[f64]) -> f64 {
    let m = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + kahan_sum(zs.iter().map(|&z| (z - m).exp())).ln()
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    Ok(())
}

fn check_rewards(policy: &EnumeratedPolicy, rewards: &[f64]) -> Result<()> {
    if rewards.len() != policy.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rewards for a support of {}",
            rewards.len(),
            policy.len()
        )));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "rewards must be finite, got {bad}"
        )));
    }
    Ok(())
}

/// Tabulates the model's continuation distribution after `prefix`: every
/// EOS-terminated continuation of length <= max_len plus length-`max_len`
/// tail buckets, in depth-first order with EOS explored first at each node.
pub fn enumerate_continuations(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    max_len: usize,
) -> Result<EnumeratedPolicy> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }
    if prefix.ends_with_eos() {
        return Err(Error::InvalidSequence(
            "cannot enumerate continuations of a terminated prefix".into(),
        ));
    }
    if prefix.len() + max_len > config.max_context {
        return Err(Error::ContextOverflow {
            len: prefix.len() + max_len,
            max_context: config.max_context,
        });
    }
    let budget = (config.vocab_size as u128)
        .checked_pow(max_len as u32)
        .unwrap_or(u128::MAX);
    if budget > 1_000_000 {
        return Err(Error::SpaceTooLarge(budget.min(u64::MAX as u128) as u64));
    }

    let mut support = Vec::new();
    let mut probs = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    descend(
        params,
        config,
        prefix.ids(),
        max_len,
        &mut path,
        0.0,
        &mut support,
        &mut probs,
    )?;
    EnumeratedPolicy::new(support, probs)
}

#[allow(clippy::too_many_arguments)]
fn descend(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &[usize],
    max_len: usize,
    path: &mut Vec<usize>,
    logp: f64,
    support: &mut Vec<SupportElement>,
    probs: &mut Vec<f64>,
) -> Result<()> {
    let mut ids = Vec::with_capacity(prefix.len() + path.len());
    ids.extend_from_slice(prefix);
    ids.extend_from_slice(path);
    let trace = forward_ids(params, config, &ids)?;
    let row = trace.logits_at(ids.len() - 1);
    let lse = lse_slice(row);
    for v in 0..config.vocab_size {
        let lp = logp + row[v] - lse;
        if v == EOS {
            let mut elem = path.clone();
            elem.push(EOS);
            support.push(SupportElement {
                ids: elem,
                terminated: true,
            });
            probs.push(lp.exp());
        } else if path.len() + 1 == max_len {
            let mut elem = path.clone();
            elem.push(v);
            support.push(SupportElement {
                ids: elem,
                terminated: false,
            });
            probs.push(lp.exp());
        } else {
            path.push(v);
            descend(params, config, prefix, max_len, path, lp, support, probs)?;
            path.pop();
        }
    }
    Ok(())
}

/// `Z = sum_y rho(y) exp(r(y) / beta)`, accumulated in log space.
pub fn partition_function(
    reference: &EnumeratedPolicy,
    rewards: &[f64],
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    check_rewards(reference, rewards)?;
    let terms: Vec<f64> = reference
        .probs
        .iter()
        .zip(rewards)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &r)| p.ln() + r / beta)
        .collect();
    Ok(lse_slice(&terms).exp())
}

/// The exact maximiser `pi*(y) = rho(y) exp(r(y)/beta) / Z` on the same
/// support as the reference.
pub fn optimal_policy(
    reference: &EnumeratedPolicy,
    rewards: &[f64],
    beta: f64,
) -> Result<EnumeratedPolicy> {
    check_beta(beta)?;
    check_rewards(reference, rewards)?;
    let log_terms: Vec<f64> = reference
        .probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| {
            if p > 0.0 {
                p.ln() + r / beta
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let log_z = lse_slice(&log_terms);
    let probs: Vec<f64> = log_terms.iter().map(|&t| (t - log_z).exp()).collect();
    EnumeratedPolicy::new(reference.support.clone(), probs)
}

/// `J(pi) = E_pi[r] - beta * KL(pi || rho)` over the shared support, with
/// the convention `0 * ln 0 = 0`.
pub fn rlhf_objective_value(
    policy: &EnumeratedPolicy,
    reference: &EnumeratedPolicy,
    rewards: &[f64],
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    check_rewards(policy, rewards)?;
    if !policy.same_support(reference) {
        return Err(Error::ShapeMismatch(
            "policy and reference enumerate different supports".into(),
        ));
    }
    let mut terms = Vec::with_capacity(policy.len());
    for i in 0..policy.len() {
        let p = policy.probs[i];
        if p == 0.0 {
            continue;
        }
        let rho = reference.probs[i];
        if rho == 0.0 {
            return Err(Error::SupportViolation(i));
        }
        terms.push(p * rewards[i] - beta * p * (p.ln() - rho.ln()));
    }
    Ok(kahan_sum(terms.into_iter()))
}

/// Dirichlet-jitters a policy around itself: probabilities are replaced by
/// `Dirichlet(concentration * (p_i + 1/n))` draws over the same support.
/// Used to probe that no nearby policy beats the closed-form optimum.
pub fn perturb_policy(
    policy: &EnumeratedPolicy,
    concentration: f64,
    seed: u64,
) -> Result<EnumeratedPolicy> {
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let n = policy.len() as f64;
    let mut rng = stream_rng(seed, Stream::Perturb, 0);
    let mut draws = Vec::with_capacity(policy.len());
    for &p in &policy.probs {
        let alpha = concentration * (p + 1.0 / n);
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| {
            Error::InvalidConfig(format!("invalid Dirichlet concentration {alpha}: {e}"))
        })?;
        let mut g: f64 = gamma.sample(&mut rng);
        // Guard against zero draws from extremely small shapes: retry a few
        // times, then fall back to a tiny positive mass.
        let mut tries = 0;
        while !(g > 0.0) && tries < 8 {
            g = gamma.sample(&mut rng);
            tries += 1;
        }
        if !(g > 0.0) {
            g = f64::MIN_POSITIVE * rng.gen_range(1.0..2.0);
        }
        draws.push(g);
    }
    let total = kahan_sum(draws.iter().copied());
    let probs: Vec<f64> = draws.iter().map(|&g| g / total).collect();
    EnumeratedPolicy::new(policy.support.clone(), probs)
}

/// Total-variation distance between two policies on the same support.
pub fn total_variation(a: &EnumeratedPolicy, b: &EnumeratedPolicy) -> Result<f64> {
    if !a.same_support(b) {
        return Err(Error::ShapeMismatch(
            "total variation over different supports".into(),
        ));
    }
    Ok(0.5 * kahan_sum(a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs())))
}

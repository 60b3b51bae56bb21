//! Acceptance gate: one pass/fail line per criterion, pinned tolerances.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines
//! as they complete; the single test fails if any criterion fails.

use std::time::Instant;

use rand::Rng;

use cpo_lab::ebm::{
    enumerate_continuations, optimal_policy, partition_function, perturb_policy,
    rlhf_objective_value, EnumeratedPolicy, SupportElement,
};
use cpo_lab::error::Result;
use cpo_lab::eval::{
    exact_reverse_kl_enum, interpolate_parameters, length_norm_nll, reverse_kl_surrogate,
    EnsembleSpec,
};
use cpo_lab::gradcheck::finite_difference_suite;
use cpo_lab::model::{forward_logits, init_parameters, ModelConfig};
use cpo_lab::negatives::{
    gen_autoregressive, gen_batch, gen_meanfield, gen_truncation, meanfield_positions,
    NegativeSamplerConfig,
};
use cpo_lab::objectives::{Ranking, 
    best_of_k_prob, cpo_loss, cpo_ranked_loss, dpo_pair_loss, implicit_reward, LogRatioGroup,
};
use cpo_lab::policy::{SequenceSampler, SequenceScorer};

use cpo_lab::seeding::{derive_seed, stream_rng, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::{run_experiment, ExperimentSpec};

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// All permutations of 0..k via Heap's algorithm.
fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..k).collect();
    let mut out = vec![items.clone()];
    let mut c = vec![0usize; k];
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            out.push(items.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// An explicit finite distribution over continuations, used as both policy
/// and oracle where the criteria require exactly-known probabilities.
struct TableDist {
    vocab: usize,
    seqs: Vec<TokenSequence>,
    probs: Vec<f64>,
}

impl TableDist {
    /// Every EOS-terminated continuation with body length < max_body_plus_one
    /// over tokens 1..vocab, with normalised pseudo-random probabilities.
    fn full_support(vocab: usize, max_len: usize, seed: u64) -> TableDist {
        let mut seqs = Vec::new();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(body) = stack.pop() {
            let mut ids = body.clone();
            ids.push(0);
            seqs.push(TokenSequence::new(ids).unwrap());
            if body.len() + 1 < max_len {
                for v in 1..vocab {
                    let mut next = body.clone();
                    next.push(v);
                    stack.push(next);
                }
            }
        }
        seqs.sort();
        let mut rng = stream_rng(seed, Stream::Eval, 7);
        let raw: Vec<f64> = (0..seqs.len()).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        TableDist { vocab, seqs, probs }
    }
}

impl SequenceScorer for TableDist {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn log_prob(&self, _prefix: &TokenSequence, cont: &TokenSequence) -> Result<f64> {
        Ok(self
            .seqs
            .iter()
            .position(|s| s == cont)
            .map(|i| self.probs[i].ln())
            .unwrap_or(f64::NEG_INFINITY))
    }
}

impl SequenceSampler for TableDist {
    fn sample(&self, _prefix: &TokenSequence, _max_new: usize, seed: u64) -> Result<TokenSequence> {
        let mut rng = stream_rng(seed, Stream::Eval, 11);
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (s, &p) in self.seqs.iter().zip(&self.probs) {
            if u < p {
                return Ok(s.clone());
            }
            u -= p;
        }
        Ok(self.seqs.last().unwrap().clone())
    }
}

/// A scorer that puts probability 1/vocab on every token of every position.
struct UniformScorer {
    vocab: usize,
}

impl SequenceScorer for UniformScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn log_prob(&self, _prefix: &TokenSequence, cont: &TokenSequence) -> Result<f64> {
        Ok(-(cont.len() as f64) * (self.vocab as f64).ln())
    }
}

fn random_ratio_group(rng: &mut impl Rng, k: usize) -> LogRatioGroup {
    let ratios: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    LogRatioGroup::new(ratios).unwrap()
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> std::result::Result<String, String> {
    let t0 = Instant::now();
    let reports = finite_difference_suite(7, 100, 1e-5).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let mut worst = ("", 0.0f64);
    for r in &reports {
        if r.n_params < 500 {
            return Err(format!("{} fixture has only {} parameters", r.objective, r.n_params));
        }
        if r.coords_checked != 100 {
            return Err(format!("{} checked {} coordinates", r.objective, r.coords_checked));
        }
        if r.max_rel_err >= 1e-4 {
            return Err(format!(
                "{} max relative error {:.3e} at coordinate {}",
                r.objective, r.max_rel_err, r.worst_coord
            ));
        }
        if r.max_rel_err > worst.1 {
            worst = (r.objective, r.max_rel_err);
        }
    }
    let mut names: Vec<&str> = reports.iter().map(|r| r.objective).collect();
    names.sort_unstable();
    if names != ["cpo_loss", "cpo_ranked_loss", "dpo_pair_loss", "mle_loss"] {
        return Err(format!("unexpected objective set {names:?}"));
    }
    if elapsed >= 120.0 {
        return Err(format!("suite took {elapsed:.1} s (>= 120 s)"));
    }
    Ok(format!(
        "4 objectives, 100 coords each, worst rel err {:.2e} ({}), {:.1} s",
        worst.1, worst.0, elapsed
    ))
}

fn criterion_2() -> std::result::Result<String, String> {
    for k in [2usize, 3, 12] {
        let group = LogRatioGroup::new(vec![0.0; k]).map_err(|e| e.to_string())?;
        let beta = 5.0;
        let l = cpo_loss(&group, beta).map_err(|e| e.to_string())?;
        if (l - (k as f64).ln()).abs() > 1e-9 {
            return Err(format!("cpo K={k}: {l} vs ln K {}", (k as f64).ln()));
        }
        let ranking = Ranking::new((0..k).collect()).map_err(|e| e.to_string())?;
        let lr = cpo_ranked_loss(&group, &ranking, beta).map_err(|e| e.to_string())?;
        if (lr - ln_factorial(k)).abs() > 1e-9 {
            return Err(format!("ranked K={k}: {lr} vs ln K! {}", ln_factorial(k)));
        }
    }
    Ok("loss at theta = ref equals ln K and ln K! within 1e-9 for K in {2, 3, 12}".into())
}

fn criterion_3() -> std::result::Result<String, String> {
    let mut rng = stream_rng(3, Stream::Eval, 0);
    let identity = Ranking::new(vec![0, 1]).map_err(|e| e.to_string())?;
    let mut max_gap = 0.0f64;
    for _ in 0..1000 {
        let group = random_ratio_group(&mut rng, 2);
        let beta = rng.gen_range(0.2..6.0);
        let dpo = dpo_pair_loss(&group, beta).map_err(|e| e.to_string())?;
        let cpo = cpo_loss(&group, beta).map_err(|e| e.to_string())?;
        let ranked = cpo_ranked_loss(&group, &identity, beta).map_err(|e| e.to_string())?;
        max_gap = max_gap.max((cpo - dpo).abs()).max((ranked - dpo).abs());
        if (cpo - dpo).abs() >= 1e-12 || (ranked - dpo).abs() >= 1e-12 {
            return Err(format!("K=2 losses disagree: dpo {dpo}, cpo {cpo}, ranked {ranked}"));
        }
    }
    Ok(format!("1000 random K=2 groups, max |gap| {max_gap:.2e}"))
}

fn criterion_4() -> std::result::Result<String, String> {
    let mut rng = stream_rng(4, Stream::Eval, 0);
    let mut worst = 0.0f64;
    for k in [2usize, 3, 4, 5] {
        let perms = permutations(k);
        for _ in 0..100 {
            let group = random_ratio_group(&mut rng, k);
            let beta = rng.gen_range(0.2..4.0);
            let mut total = 0.0;
            for tau in &perms {
                let ranking = Ranking::new(tau.clone()).map_err(|e| e.to_string())?;
                let loss = cpo_ranked_loss(&group, &ranking, beta).map_err(|e| e.to_string())?;
                total += (-loss).exp();
            }
            worst = worst.max((total - 1.0).abs());
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("K={k}: sum over rankings = {total}"));
            }
        }
    }
    Ok(format!("sum over K! rankings of exp(-loss) = 1, worst |dev| {worst:.2e}"))
}

fn criterion_5() -> std::result::Result<String, String> {
    let mut rng = stream_rng(5, Stream::Eval, 0);
    // Common additive shift of all ratios leaves every objective unchanged.
    for _ in 0..200 {
        let k = rng.gen_range(2..8usize);
        let ratios: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = ratios.iter().map(|r| r + shift).collect();
        let beta = rng.gen_range(0.2..6.0);
        let a = LogRatioGroup::new(ratios).map_err(|e| e.to_string())?;
        let b = LogRatioGroup::new(shifted).map_err(|e| e.to_string())?;
        let mut tau: Vec<usize> = (0..k).collect();
        for i in 0..k {
            let j = rng.gen_range(i..k);
            tau.swap(i, j);
        }
        let ranking = Ranking::new(tau).map_err(|e| e.to_string())?;
        let pairs = [
            (cpo_loss(&a, beta), cpo_loss(&b, beta)),
            (
                cpo_ranked_loss(&a, &ranking, beta),
                cpo_ranked_loss(&b, &ranking, beta),
            ),
        ];
        for (la, lb) in pairs {
            let (la, lb) = (la.map_err(|e| e.to_string())?, lb.map_err(|e| e.to_string())?);
            if (la - lb).abs() > 1e-12 {
                return Err(format!("shift {shift} moved a loss by {:.2e}", (la - lb).abs()));
            }
        }
    }
    // Pairwise loss gets its own shift rounds since it is defined at K=2.
    for _ in 0..100 {
        let ratios: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let shift = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = ratios.iter().map(|r| r + shift).collect();
        let beta = rng.gen_range(0.2..6.0);
        let a = LogRatioGroup::new(ratios).map_err(|e| e.to_string())?;
        let b = LogRatioGroup::new(shifted).map_err(|e| e.to_string())?;
        let da = dpo_pair_loss(&a, beta).map_err(|e| e.to_string())?;
        let db = dpo_pair_loss(&b, beta).map_err(|e| e.to_string())?;
        if (da - db).abs() > 1e-12 {
            return Err(format!("shift moved dpo by {:.2e}", (da - db).abs()));
        }
    }
    // Partition-function bridge: the implicit reward of the closed-form
    // optimum differs from the true reward only by beta * ln Z, so best-of-K
    // probabilities computed from either coincide.
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = stream_rng(55, Stream::Eval, inst);
        let k = rng.gen_range(3..9usize);
        let support: Vec<SupportElement> = (0..k)
            .map(|i| SupportElement {
                ids: vec![i + 1, 0],
                terminated: true,
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let head: f64 = probs[1..].iter().sum();
        probs[0] = 1.0 - head;
        let rho = EnumeratedPolicy::new(support, probs).map_err(|e| e.to_string())?;
        let rewards: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let beta = rng.gen_range(0.5..5.0);
        let star = optimal_policy(&rho, &rewards, beta).map_err(|e| e.to_string())?;
        let implicit: Vec<f64> = (0..k)
            .map(|i| implicit_reward(star.probs()[i].ln(), rho.probs()[i].ln(), beta))
            .collect();
        let from_true = best_of_k_prob(&rewards).map_err(|e| e.to_string())?;
        let from_implicit = best_of_k_prob(&implicit).map_err(|e| e.to_string())?;
        for (p, q) in from_true.iter().zip(&from_implicit) {
            worst = worst.max((p - q).abs());
            if (p - q).abs() > 1e-10 {
                return Err(format!(
                    "instance {inst}: best-of-K gap {:.2e} exceeds 1e-10",
                    (p - q).abs()
                ));
            }
        }
    }
    Ok(format!(
        "shift invariance within 1e-12; best-of-K bridge worst gap {worst:.2e} over 100 instances"
    ))
}

fn criterion_6() -> std::result::Result<String, String> {
    let config = ModelConfig {
        vocab_size: 5,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_context: 8,
    };
    let params = init_parameters(&config, 66).map_err(|e| e.to_string())?;
    let prefix = TokenSequence::new(vec![1]).map_err(|e| e.to_string())?;
    let rho = enumerate_continuations(&params, &config, &prefix, 3).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(6, Stream::Eval, 0);
    let rewards: Vec<f64> = (0..rho.len()).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let beta = 2.0;
    let z = partition_function(&rho, &rewards, beta).map_err(|e| e.to_string())?;
    let star = optimal_policy(&rho, &rewards, beta).map_err(|e| e.to_string())?;
    let star_value = rlhf_objective_value(&star, &rho, &rewards, beta).map_err(|e| e.to_string())?;
    if (star_value - beta * z.ln()).abs() > 1e-9 {
        return Err(format!(
            "optimum value {star_value} vs beta ln Z {}",
            beta * z.ln()
        ));
    }
    let mut best_challenger = f64::NEG_INFINITY;
    for i in 0..1000u64 {
        let p = perturb_policy(&star, 200.0, derive_seed(6, Stream::Perturb, i))
            .map_err(|e| e.to_string())?;
        let v = rlhf_objective_value(&p, &rho, &rewards, beta).map_err(|e| e.to_string())?;
        best_challenger = best_challenger.max(v);
        if v > star_value + 1e-12 {
            return Err(format!("perturbation {i} beats the optimum: {v} > {star_value}"));
        }
    }
    Ok(format!(
        "value = beta ln Z within {:.1e}; 1000 perturbations all below (best gap {:.2e})",
        (star_value - beta * z.ln()).abs(),
        star_value - best_challenger
    ))
}

fn criterion_7() -> std::result::Result<String, String> {
    let q = TableDist::full_support(4, 3, 71);
    let mut p = TableDist::full_support(4, 3, 72);
    let prefix = TokenSequence::new(vec![1, 2]).map_err(|e| e.to_string())?;

    let self_kl = exact_reverse_kl_enum(&q, &q, &prefix, 3).map_err(|e| e.to_string())?;
    if self_kl.abs() > 1e-9 {
        return Err(format!("KL(Q || Q) = {self_kl}"));
    }
    let cross_kl = exact_reverse_kl_enum(&q, &p, &prefix, 3).map_err(|e| e.to_string())?;
    if cross_kl <= 1e-9 {
        return Err(format!("KL(Q || P) = {cross_kl} not positive for Q != P"));
    }

    // Surrogate with every support element sampled equals the exact value.
    let surrogate =
        reverse_kl_surrogate(&q, &p, &[prefix.clone()], 4000, 3, 77).map_err(|e| e.to_string())?;
    if (surrogate - cross_kl).abs() > 1e-9 {
        return Err(format!(
            "full-support surrogate {surrogate} vs exact {cross_kl} (gap {:.2e})",
            (surrogate - cross_kl).abs()
        ));
    }

    // Length-normalised NLL under a uniform oracle is exactly ln(vocab).
    let uniform = UniformScorer { vocab: 4 };
    let items = vec![
        (
            TokenSequence::new(vec![1]).unwrap(),
            vec![
                TokenSequence::new(vec![2, 0]).unwrap(),
                TokenSequence::new(vec![3, 1, 0]).unwrap(),
            ],
        ),
        (
            TokenSequence::new(vec![2, 3]).unwrap(),
            vec![TokenSequence::new(vec![0]).unwrap()],
        ),
    ];
    let nll = length_norm_nll(&uniform, &items).map_err(|e| e.to_string())?;
    // Two generations for the first prefix, one for the second: inner sums
    // are 2 ln 4 and ln 4, averaged over two prefixes -> 1.5 ln 4.
    let expect = 1.5 * 4.0f64.ln();
    if (nll - expect).abs() > 1e-12 {
        return Err(format!("uniform-oracle NLL {nll} vs {expect}"));
    }
    p.probs = q.probs.clone();
    let zero_kl = exact_reverse_kl_enum(&q, &p, &prefix, 3).map_err(|e| e.to_string())?;
    if zero_kl.abs() > 1e-9 {
        return Err(format!("KL between equal tables = {zero_kl}"));
    }
    Ok(format!(
        "exact KL >= 0 with equality iff equal; surrogate = exact within {:.1e}; uniform NLL = 1.5 ln 4",
        (surrogate - cross_kl).abs()
    ))
}

fn criterion_8() -> std::result::Result<String, String> {
    let config = ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_context: 16,
    };
    let a = init_parameters(&config, 81).map_err(|e| e.to_string())?;
    let b = init_parameters(&config, 82).map_err(|e| e.to_string())?;
    let at_one = interpolate_parameters(&EnsembleSpec {
        alpha: 1.0,
        theta_mle: &a,
        theta_cpo: &b,
    })
    .map_err(|e| e.to_string())?;
    let at_zero = interpolate_parameters(&EnsembleSpec {
        alpha: 0.0,
        theta_mle: &a,
        theta_cpo: &b,
    })
    .map_err(|e| e.to_string())?;
    let bits = |p: &cpo_lab::model::Parameters| -> Vec<u64> {
        p.flat().iter().map(|x| x.to_bits()).collect()
    };
    if bits(&at_one) != bits(&a) || bits(&at_zero) != bits(&b) {
        return Err("endpoint interpolation is not bit-exact".into());
    }
    let mid = interpolate_parameters(&EnsembleSpec {
        alpha: 0.5,
        theta_mle: &a,
        theta_cpo: &b,
    })
    .map_err(|e| e.to_string())?;
    for i in 0..mid.len() {
        let expect = (a.flat()[i] + b.flat()[i]) / 2.0;
        if mid.flat()[i] != expect {
            return Err(format!("alpha 0.5 deviates from the elementwise mean at {i}"));
        }
    }
    Ok("endpoints bit-exact; alpha = 0.5 equals the elementwise mean".into())
}

fn criterion_9() -> std::result::Result<String, String> {
    let config = ModelConfig {
        vocab_size: 64,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_context: 16,
    };
    let params = init_parameters(&config, 91).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(9, Stream::Eval, 0);

    // Mean-field: exactly max(1, round(0.15 T)) positions selected, nothing
    // outside the selected set changes, shape preserved.
    for trial in 0..10_000u64 {
        let body_len = rng.gen_range(1..10usize);
        let prefix = TokenSequence::new(
            (0..3).map(|_| rng.gen_range(1..64)).collect::<Vec<_>>(),
        )
        .map_err(|e| e.to_string())?;
        let mut ids: Vec<usize> = (0..body_len).map(|_| rng.gen_range(1..64)).collect();
        ids.push(0);
        let cont = TokenSequence::new(ids).map_err(|e| e.to_string())?;
        let out = gen_meanfield(&params, &config, &prefix, &cont, 0.15, trial)
            .map_err(|e| e.to_string())?;
        let selected = meanfield_positions(body_len, cont.len(), 0.15, trial);
        let expect = ((0.15 * cont.len() as f64).round() as usize).max(1);
        if selected.len() != expect {
            return Err(format!(
                "MN trial {trial}: {} positions selected, expected {expect}",
                selected.len()
            ));
        }
        if out.len() != cont.len() || !out.ends_with_eos() {
            return Err(format!("MN trial {trial}: malformed output"));
        }
        for t in 0..body_len {
            if out.ids()[t] != cont.ids()[t] && !selected.contains(&t) {
                return Err(format!("MN trial {trial}: unselected position {t} changed"));
            }
        }
    }

    // Truncation: EOS-terminated, body a proper prefix of the input
    // sequence. A single-token body is force-cut at 1, so the output body
    // can equal the input body; it is still strictly shorter than the
    // EOS-terminated input.
    for trial in 0..10_000u64 {
        let body_len = rng.gen_range(1..10usize);
        let mut ids: Vec<usize> = (0..body_len).map(|_| rng.gen_range(1..64)).collect();
        ids.push(0);
        let cont = TokenSequence::new(ids).map_err(|e| e.to_string())?;
        let out = gen_truncation(&cont, trial).map_err(|e| e.to_string())?;
        if !out.ends_with_eos() {
            return Err(format!("TN trial {trial}: no trailing EOS"));
        }
        if out.body().len() >= cont.ids().len()
            || out.body() != &cont.ids()[..out.body().len()]
        {
            return Err(format!("TN trial {trial}: body is not a proper prefix"));
        }
        if body_len >= 2 && out.body().len() >= body_len {
            return Err(format!("TN trial {trial}: cut did not shorten the body"));
        }
    }

    // Autoregressive: every emitted token lies in the reference's top-50 at
    // its step. 2500 calls x 4 samples = 10^4 sequences.
    let sampler_cfg = NegativeSamplerConfig {
        topk: 50,
        ..NegativeSamplerConfig::default()
    };
    for call in 0..2500u64 {
        let prefix = TokenSequence::new(
            (0..4).map(|_| rng.gen_range(1..64)).collect::<Vec<_>>(),
        )
        .map_err(|e| e.to_string())?;
        let mut cfg = sampler_cfg.clone();
        cfg.seed = call;
        let negs = gen_autoregressive(&params, &config, &prefix, 4, &cfg)
            .map_err(|e| e.to_string())?;
        for neg in &negs {
            let mut ctx = prefix.ids().to_vec();
            for &tok in neg.ids() {
                let seq = TokenSequence::new(ctx.clone()).map_err(|e| e.to_string())?;
                let trace = forward_logits(&params, &config, &seq).map_err(|e| e.to_string())?;
                let row = trace.logits_at(ctx.len() - 1);
                let mut sorted: Vec<f64> = row.to_vec();
                sorted.sort_by(|x, y| y.total_cmp(x));
                let cutoff = sorted[49];
                if row[tok] < cutoff {
                    return Err(format!(
                        "AN call {call}: token {tok} below the top-50 cutoff"
                    ));
                }
                if tok == 0 {
                    break;
                }
                ctx.push(tok);
            }
        }
    }

    // Batch: never the anchor's own continuation. Continuations are made
    // pairwise distinct (the index is baked into the first two tokens) so
    // sequence equality implies index equality.
    let pairs: Vec<(TokenSequence, TokenSequence)> = (0..64usize)
        .map(|i| {
            let p = TokenSequence::new(vec![1 + (i % 63)]).unwrap();
            let body: Vec<usize> = vec![1 + (i / 8), 1 + (i % 8), 62, 0];
            (p, TokenSequence::new(body).unwrap())
        })
        .collect();
    for trial in 0..10_000u64 {
        let anchor = (trial % 64) as usize;
        let negs = gen_batch(&pairs, anchor, 3, trial).map_err(|e| e.to_string())?;
        for neg in &negs {
            if neg == &pairs[anchor].1 {
                return Err(format!("BN trial {trial}: anchor's own continuation returned"));
            }
        }
    }

    Ok("MN / TN / AN / BN contracts hold over 10^4 randomized trials each".into())
}

type Verdict = std::result::Result<String, String>;

/// Byte-compares the artifact lists of two runs of the same spec.
fn compare_artifacts(
    a: &cpo_lab::train::ExperimentOutput,
    b: &cpo_lab::train::ExperimentOutput,
) -> Verdict {
    let list_a: Vec<_> = a.checkpoint_files.iter().chain(&a.metric_files).collect();
    let list_b: Vec<_> = b.checkpoint_files.iter().chain(&b.metric_files).collect();
    if list_a.len() != list_b.len() {
        return Err(format!(
            "artifact counts differ: {} vs {}",
            list_a.len(),
            list_b.len()
        ));
    }
    for (fa, fb) in list_a.iter().zip(&list_b) {
        if fa.file_name() != fb.file_name() {
            return Err(format!(
                "artifact lists diverge: {:?} vs {:?}",
                fa.file_name(),
                fb.file_name()
            ));
        }
        let ba = std::fs::read(fa).map_err(|e| format!("cannot read {fa:?}: {e}"))?;
        let bb = std::fs::read(fb).map_err(|e| format!("cannot read {fb:?}: {e}"))?;
        if ba != bb {
            return Err(format!("{:?} differs between identical runs", fa.file_name()));
        }
    }
    Ok(format!("{} artifacts byte-identical across two seed-1 runs", list_a.len()))
}

fn criterion_10_and_11() -> (Verdict, Verdict) {
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let mut c11: Verdict = Err("seed 1 experiment did not complete".into());
    for seed in [1u64, 2, 3] {
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return (Err(e.to_string()), Err("skipped: no tempdir".into())),
        };
        let t0 = Instant::now();
        let out = match run_experiment(&ExperimentSpec::desk(seed), dir.path()) {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                break;
            }
        };
        let minutes = t0.elapsed().as_secs_f64() / 60.0;
        let gain = out.cpo_final.gt_top1_rate - out.baseline_final.gt_top1_rate;
        let win_drop = out.baseline_final.win_rate - out.cpo_final.win_rate;
        let kl_ratio = out.cpo_final.reverse_kl / out.baseline_final.reverse_kl;
        summaries.push(format!(
            "seed {seed}: gt_top1 {:+.3}, win drop {:+.3}, kl ratio {:.3}, {:.1} min",
            gain, win_drop, kl_ratio, minutes
        ));
        if gain < 0.05 {
            failures.push(format!("seed {seed}: gt_top1 gain {gain:+.3} < +0.05"));
        }
        if seed == 1 && win_drop > 0.02 {
            failures.push(format!("seed 1: win rate dropped {win_drop:+.3} > 0.02"));
        }
        if seed == 1 && kl_ratio > 1.1 {
            failures.push(format!("seed 1: reverse KL ratio {kl_ratio:.3} > 1.1"));
        }
        if minutes >= 30.0 {
            failures.push(format!("seed {seed}: {minutes:.1} min >= 30 min"));
        }
        // Reproducibility rides on seed 1 regardless of threshold outcomes.
        if seed == 1 {
            c11 = match tempfile::tempdir() {
                Err(e) => Err(e.to_string()),
                Ok(dir2) => match run_experiment(&ExperimentSpec::desk(1), dir2.path()) {
                    Err(e) => Err(format!("rerun failed: {e}")),
                    Ok(out2) => compare_artifacts(&out, &out2),
                },
            };
        }
        // A threshold failure on an early seed makes later seeds moot;
        // stop burning half-hours once the criterion is already lost.
        if !failures.is_empty() {
            break;
        }
    }
    let c10 = if failures.is_empty() {
        Ok(summaries.join(" ;; "))
    } else {
        Err(format!("{} | {}", failures.join(" & "), summaries.join(" ;; ")))
    };
    (c10, c11)
}

#[test]
fn acceptance() {
    let mut all_pass = true;
    let mut report = |n: u32, desc: &str, r: std::result::Result<String, String>| {
        match r {
            Ok(detail) => println!("criterion {n}: PASS — {desc}: {detail}"),
            Err(msg) => {
                all_pass = false;
                println!("criterion {n}: FAIL — {desc}: {msg}");
            }
        }
    };

    report(1, "finite-difference gradient suite", criterion_1());
    report(2, "closed-form loss at theta = ref", criterion_2());
    report(3, "K=2 reduction to DPO", criterion_3());
    report(4, "Plackett-Luce normalization", criterion_4());
    report(5, "shift invariance and partition-function bridge", criterion_5());
    report(6, "closed-form RLHF optimum on an enumerated space", criterion_6());
    report(7, "reverse-KL exact, surrogate, and uniform-oracle NLL", criterion_7());
    report(8, "weight-space ensemble endpoints and midpoint", criterion_8());
    report(9, "negative-sampler contracts", criterion_9());
    let (c10, c11) = criterion_10_and_11();
    report(10, "desk-scale training experiment", c10);
    report(11, "bytewise reproducibility", c11);

    assert!(all_pass, "one or more acceptance criteria failed");
}

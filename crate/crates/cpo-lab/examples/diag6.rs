//! Sixth diagnostic wave: widen the fan-out so mean-field resampling stops
//! cloning the ground truth. The MN conditional may redraw the original
//! token; with fan-out 3 of 15 non-EOS tokens the redraw probability is
//! ~0.32 per swap, so most groups contain an exact GT clone among their five
//! MNs and are unwinnable under ties-lose scoring. Fan-out 6 roughly halves
//! the redraw rate, doubling the winnable mass at unchanged lengths.

use std::time::Instant;

use cpo_lab::eval::{EvalSets, Evaluator};
use cpo_lab::markov::MarkovGenerator;
use cpo_lab::model::{forward_logits, init_parameters, ModelConfig, Parameters};
use cpo_lab::negatives::{PreferenceGroup, Provenance};
use cpo_lab::seeding::{derive_seed, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::{build_heldout_groups, train, ExperimentSpec, TrainConfig};

const TYPES: [(Provenance, &str); 5] = [
    (Provenance::GroundTruth, "GT"),
    (Provenance::Batch, "BN"),
    (Provenance::MeanField, "MN"),
    (Provenance::Truncation, "TN"),
    (Provenance::Autoregressive, "AN"),
];

fn group_rewards(
    params: &Parameters,
    ref_params: &Parameters,
    config: &ModelConfig,
    group: &PreferenceGroup,
) -> Vec<f64> {
    let pl = group.prefix.len();
    group
        .candidates
        .iter()
        .map(|cand| {
            let ids = TokenSequence::concat(&group.prefix, cand).unwrap();
            let seq = TokenSequence::new(ids).unwrap();
            let t = forward_logits(params, config, &seq).unwrap();
            let r = forward_logits(ref_params, config, &seq).unwrap();
            t.suffix_logprob(pl) - r.suffix_logprob(pl)
        })
        .collect()
}

/// A group is winnable iff no negative is an exact copy of the ground truth.
fn is_winnable(g: &PreferenceGroup) -> bool {
    g.candidates[1..]
        .iter()
        .all(|c| c.ids() != g.candidates[0].ids())
}

fn breakdown(
    label: &str,
    params: &Parameters,
    ref_params: &Parameters,
    config: &ModelConfig,
    groups: &[PreferenceGroup],
) {
    let mut argmax_by = [0usize; 5];
    let mut margin_sum = [0.0f64; 5];
    let mut margin_cnt = [0usize; 5];
    let mut gt_top1 = 0usize;
    let mut gt_top1_winnable = 0usize;
    let mut winnable = 0usize;
    for g in groups {
        let r = group_rewards(params, ref_params, config, g);
        let top = r[1..].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let gt_wins = r[0] > top;
        if gt_wins {
            gt_top1 += 1;
        }
        if is_winnable(g) {
            winnable += 1;
            if gt_wins {
                gt_top1_winnable += 1;
            }
        }
        let best = (0..r.len())
            .max_by(|&a, &b| r[a].total_cmp(&r[b]))
            .unwrap();
        let slot = TYPES
            .iter()
            .position(|(p, _)| *p == g.provenance[best])
            .unwrap();
        argmax_by[slot] += 1;
        for (ti, (p, _)) in TYPES.iter().enumerate().skip(1) {
            let best_of_type = r
                .iter()
                .zip(&g.provenance)
                .filter(|(_, pr)| *pr == p)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_of_type.is_finite() {
                margin_sum[ti] += r[0] - best_of_type;
                margin_cnt[ti] += 1;
            }
        }
    }
    let n = groups.len() as f64;
    print!("{label}: gt_top1 {:.3}", gt_top1 as f64 / n);
    print!(
        " (winnable {}/{}: {:.3})",
        gt_top1_winnable,
        winnable,
        gt_top1_winnable as f64 / winnable.max(1) as f64
    );
    print!("  argmax%");
    for (ti, (_, name)) in TYPES.iter().enumerate() {
        print!(" {name} {:.1}", 100.0 * argmax_by[ti] as f64 / n);
    }
    print!("  | margin");
    for (ti, (_, name)) in TYPES.iter().enumerate().skip(1) {
        if margin_cnt[ti] > 0 {
            print!(" {name} {:+.3}", margin_sum[ti] / margin_cnt[ti] as f64);
        }
    }
    println!();
}

fn main() {
    env_logger::init();
    let seed = 1u64;
    let mut spec = ExperimentSpec::desk(seed);
    spec.model.vocab_size = 16;
    spec.markov.vocab_size = 16;
    spec.markov.fan_out = 6;
    spec.markov.smoothing = 0.08;
    spec.cpo.sampler.topk = 16;
    spec.eval.sample_topk = 16;

    let oracle = MarkovGenerator::new(spec.markov).unwrap();
    let corpus = oracle
        .sample_pairs(spec.n_pairs, derive_seed(seed, Stream::Corpus, 0))
        .unwrap();
    let heldout_pairs = oracle
        .sample_pairs(spec.n_heldout_groups, derive_seed(seed, Stream::Corpus, 1))
        .unwrap();
    let eval_pairs = oracle
        .sample_pairs(spec.n_eval_pairs, derive_seed(seed, Stream::Corpus, 2))
        .unwrap();

    let config = spec.model;
    let init = init_parameters(&config, derive_seed(seed, Stream::Init, 0)).unwrap();
    let t0 = Instant::now();
    let mle_out = train(&config, &spec.mle, &corpus, &init, None, None, None, 0).unwrap();
    println!(
        "mle: {:.0} s, loss {:.3} -> {:.3}",
        t0.elapsed().as_secs_f64(),
        mle_out.first_loss,
        mle_out.final_loss
    );
    let ref_params = mle_out.params;

    let heldout_groups = build_heldout_groups(
        &ref_params,
        &config,
        &heldout_pairs,
        &spec.cpo.sampler,
        None,
        seed,
    )
    .unwrap();
    let clone_groups = heldout_groups.iter().filter(|g| !is_winnable(g)).count();
    println!(
        "held-out groups with a GT-clone negative: {}/{}",
        clone_groups,
        heldout_groups.len()
    );

    let kl_prefixes: Vec<TokenSequence> = eval_pairs.iter().map(|(p, _)| p.clone()).collect();
    let sets = EvalSets {
        heldout_groups: &heldout_groups,
        kl_prefixes: &kl_prefixes,
        winrate_pairs: &eval_pairs,
    };
    let evaluator = Evaluator::new(&oracle, &config, &ref_params, sets, spec.eval).unwrap();
    let ref_rec = evaluator.evaluate(&ref_params, 0, 0.0).unwrap();
    println!(
        "reference: nll/token {:.3} kl {:.4} win {:.3}",
        ref_rec.length_norm_nll, ref_rec.reverse_kl, ref_rec.win_rate
    );

    let baseline_cfg = TrainConfig {
        steps: spec.cpo.steps,
        seed: derive_seed(spec.mle.seed, Stream::Shuffle, 1),
        ..spec.mle.clone()
    };
    let base_out = train(
        &config,
        &baseline_cfg,
        &corpus,
        &ref_params,
        None,
        None,
        None,
        0,
    )
    .unwrap();
    let base_rec = evaluator.evaluate(&base_out.params, 500, 0.0).unwrap();
    println!(
        "baseline: win {:.3} kl {:.4}",
        base_rec.win_rate, base_rec.reverse_kl
    );
    breakdown(
        "baseline",
        &base_out.params,
        &ref_params,
        &config,
        &heldout_groups,
    );

    for (lr, batch) in [(1e-4f64, 64usize), (2e-4, 64)] {
        let mut cfg = spec.cpo.clone();
        cfg.lr = lr;
        cfg.weight_decay = 0.0;
        cfg.batch_size = batch;
        let t0 = Instant::now();
        let out = train(
            &config,
            &cfg,
            &corpus,
            &ref_params,
            Some(&ref_params),
            None,
            None,
            0,
        )
        .unwrap();
        let rec = evaluator.evaluate(&out.params, 500, out.final_loss).unwrap();
        println!(
            "cpo lr {lr:.0e} b{batch}: {:.0} s, loss {:.3} -> {:.3}, win {:.3} (Δ{:+.3}) kl ratio {:.3}",
            t0.elapsed().as_secs_f64(),
            out.first_loss,
            out.final_loss,
            rec.win_rate,
            rec.win_rate - base_rec.win_rate,
            rec.reverse_kl / base_rec.reverse_kl,
        );
        breakdown(
            &format!("cpo lr {lr:.0e} b{batch}"),
            &out.params,
            &ref_params,
            &config,
            &heldout_groups,
        );
    }
}

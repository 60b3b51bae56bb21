//! Fifth diagnostic wave: the well-fit d64/L2 reference (cached from the
//! third wave) with the noise-crushing recipe the fourth wave validated on
//! the small model — batch 64, low learning rate, weight decay 0.

use std::path::Path;
use std::time::Instant;

use cpo_lab::eval::{EvalSets, Evaluator};
use cpo_lab::markov::MarkovGenerator;
use cpo_lab::model::{forward_logits, load_checkpoint, ModelConfig, Parameters};
use cpo_lab::negatives::{PreferenceGroup, Provenance};
use cpo_lab::seeding::{derive_seed, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::{build_heldout_groups, train, ExperimentSpec};

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
    for g in groups {
        let r = group_rewards(params, ref_params, config, g);
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
    print!("{label}: argmax%");
    for (ti, (_, name)) in TYPES.iter().enumerate() {
        print!(" {name} {:.1}", 100.0 * argmax_by[ti] as f64 / n);
    }
    print!("  | mean margin r0-best");
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
    spec.markov.fan_out = 3;
    spec.markov.smoothing = 0.05;
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

    let (config, ref_params) = load_checkpoint(Path::new("/tmp/diag3/ref.ckpt")).unwrap();
    let (_, baseline) = load_checkpoint(Path::new("/tmp/diag3/baseline.ckpt")).unwrap();

    let heldout_groups = build_heldout_groups(
        &ref_params,
        &config,
        &heldout_pairs,
        &spec.cpo.sampler,
        None,
        seed,
    )
    .unwrap();
    let kl_prefixes: Vec<TokenSequence> = eval_pairs.iter().map(|(p, _)| p.clone()).collect();
    let sets = EvalSets {
        heldout_groups: &heldout_groups,
        kl_prefixes: &kl_prefixes,
        winrate_pairs: &eval_pairs,
    };
    let evaluator = Evaluator::new(&oracle, &config, &ref_params, sets, spec.eval).unwrap();

    let base_rec = evaluator.evaluate(&baseline, 500, 0.0).unwrap();
    println!(
        "baseline: gt_top1 {:.3} win {:.3} kl {:.4}",
        base_rec.gt_top1_rate, base_rec.win_rate, base_rec.reverse_kl
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
            "cpo lr {lr:.0e} b{batch}: {:.0} s, loss {:.3} -> {:.3}, gt_top1 {:.3} (Δ{:+.3}) win {:.3} (Δ{:+.3}) kl ratio {:.3}",
            t0.elapsed().as_secs_f64(),
            out.first_loss,
            out.final_loss,
            rec.gt_top1_rate,
            rec.gt_top1_rate - base_rec.gt_top1_rate,
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

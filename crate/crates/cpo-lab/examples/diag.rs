//! CPO hyperparameter diagnostic sweep. Not part of the test suite.

use std::time::Instant;

use cpo_lab::eval::{EvalOptions, EvalSets, Evaluator};
use cpo_lab::markov::MarkovGenerator;
use cpo_lab::model::init_parameters;
use cpo_lab::seeding::{derive_seed, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::{build_heldout_groups, train, ExperimentSpec, Objective};

fn main() {
    env_logger::init();
    let seed = 1u64;
    let spec = ExperimentSpec::desk(seed);
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

    let init = init_parameters(&spec.model, derive_seed(seed, Stream::Init, 0)).unwrap();
    let t0 = Instant::now();
    let mle_out = train(&spec.model, &spec.mle, &corpus, &init, None, None, None, 0).unwrap();
    println!(
        "MLE ref: {:.0} s, loss {:.3} -> {:.3}",
        t0.elapsed().as_secs_f64(),
        mle_out.first_loss,
        mle_out.final_loss
    );
    let ref_params = mle_out.params;

    let heldout_groups = build_heldout_groups(
        &ref_params,
        &spec.model,
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
    let opts = EvalOptions {
        samples_per_prefix: 4,
        sample_topk: 50,
        max_new: 20,
        seed,
    };
    let evaluator = Evaluator::new(&oracle, &spec.model, &ref_params, sets, opts).unwrap();

    // MLE-continued baseline for reference.
    let mut baseline_cfg = spec.mle.clone();
    baseline_cfg.steps = 500;
    baseline_cfg.seed = derive_seed(spec.mle.seed, Stream::Shuffle, 1);
    let base_out = train(
        &spec.model,
        &baseline_cfg,
        &corpus,
        &ref_params,
        None,
        None,
        None,
        0,
    )
    .unwrap();
    let base_rec = evaluator.evaluate(&base_out.params, 500, base_out.final_loss).unwrap();
    println!(
        "baseline: gt_top1 {:.3} win {:.3} kl {:.4}",
        base_rec.gt_top1_rate, base_rec.win_rate, base_rec.reverse_kl
    );

    for (lr, ranked) in [
        (1e-4, true),
        (3e-4, true),
        (1e-3, true),
        (3e-3, true),
        (3e-4, false),
        (1e-3, false),
    ] {
        let mut cfg = spec.cpo.clone();
        cfg.lr = lr;
        if !ranked {
            cfg.objective = Objective::Cpo;
            cfg.cpo.use_ranking = false;
        }
        let t0 = Instant::now();
        let out = train(
            &spec.model,
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
            "lr {lr:.0e} ranked {ranked}: {:.0} s, loss {:.3} -> {:.3}, gt_top1 {:.3} (Δ{:+.3}) win {:.3} (Δ{:+.3}) kl ratio {:.3}",
            t0.elapsed().as_secs_f64(),
            out.first_loss,
            out.final_loss,
            rec.gt_top1_rate,
            rec.gt_top1_rate - base_rec.gt_top1_rate,
            rec.win_rate,
            rec.win_rate - base_rec.win_rate,
            rec.reverse_kl / base_rec.reverse_kl,
        );
    }
}

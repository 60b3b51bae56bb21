//! Gradient-norm probe: measures batch gradient norms for MLE and ranked-CPO
//! at the frozen reference and along a short unstable trajectory.

use cpo_lab::markov::MarkovGenerator;
use cpo_lab::model::{
    forward_logits, load_checkpoint, loss_backward, ForwardTrace, LossTerm,
};
use cpo_lab::negatives::assemble_group;
use cpo_lab::objectives::{cpo_ranked_loss, cpo_ranked_loss_grad, mle_loss, LogRatioGroup};
use cpo_lab::optim::{optimizer_step, AdamHyper, AdamState};
use cpo_lab::ranking::{embed_from_trace, rank_by_similarity};
use cpo_lab::seeding::{derive_seed, Stream};
use cpo_lab::tokens::TokenSequence;
use cpo_lab::train::ExperimentSpec;

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn main() -> cpo_lab::error::Result<()> {
    let spec = ExperimentSpec::desk(1);
    let (config, ref_params) = load_checkpoint(std::path::Path::new(
        "/tmp/cpo-pilot-1/reference_mle.ckpt",
    ))?;
    let gen = MarkovGenerator::new(spec.markov)?;
    let corpus = gen.sample_pairs(spec.n_pairs, derive_seed(1, Stream::Corpus, 0))?;

    // MLE batch gradient norm at the reference.
    let batch: Vec<(TokenSequence, TokenSequence)> = corpus[..16].to_vec();
    let mut params = ref_params.clone();
    {
        let mut traces = Vec::new();
        let mut n_tokens = 0usize;
        for (p, c) in &batch {
            let ids = TokenSequence::concat(p, c)?;
            let seq = TokenSequence::new(ids)?;
            let trace = forward_logits(&params, &config, &seq)?;
            n_tokens += c.len();
            traces.push((trace, p.len()));
        }
        let w = -1.0 / n_tokens as f64;
        let terms: Vec<LossTerm> = traces
            .iter()
            .map(|(t, pl)| LossTerm {
                trace: t,
                prefix_len: *pl,
                weight: w,
            })
            .collect();
        let g = loss_backward(&params, &config, &terms)?;
        println!(
            "mle batch grad norm at ref: {:.4} (loss {:.4})",
            norm(&g),
            mle_loss(&params, &config, &batch)?
        );
    }

    // Ranked-CPO batch gradient norms along 60 steps at lr 1e-3.
    let mut state = AdamState::new(params.len());
    let hyper = AdamHyper::new(1e-3, 0.05);
    for step in 0..60u64 {
        let mut all_terms_data: Vec<(Vec<ForwardTrace>, usize, Vec<f64>)> = Vec::new();
        let mut loss_sum = 0.0;
        for anchor in 0..16usize {
            let gseed = derive_seed(1, Stream::GroupAssembly, step * 16 + anchor as u64);
            let mut group = assemble_group(
                &ref_params,
                &config,
                &corpus,
                (step as usize * 16 + anchor) % corpus.len(),
                &spec.cpo.sampler,
                None,
                gseed,
            )?;
            let pl = group.prefix.len();
            let mut theta_lps = Vec::new();
            let mut ref_lps = Vec::new();
            let mut traces = Vec::new();
            let mut embeds = Vec::new();
            for (j, cand) in group.candidates.iter().enumerate() {
                let ids = TokenSequence::concat(&group.prefix, cand)?;
                let seq = TokenSequence::new(ids)?;
                let tr = forward_logits(&params, &config, &seq)?;
                theta_lps.push(tr.suffix_logprob(pl));
                let rtr = forward_logits(&ref_params, &config, &seq)?;
                ref_lps.push(rtr.suffix_logprob(pl));
                embeds.push(embed_from_trace(&rtr, pl, j));
                traces.push(tr);
            }
            let ranking = rank_by_similarity(&group, &embeds)?;
            let lr_group = LogRatioGroup::from_logprobs(&theta_lps, &ref_lps)?;
            let loss = cpo_ranked_loss(&lr_group, &ranking, spec.cpo.cpo.beta)?;
            let dl_dr = cpo_ranked_loss_grad(&lr_group, &ranking, spec.cpo.cpo.beta)?;
            group.ranking = Some(ranking);
            loss_sum += loss;
            all_terms_data.push((traces, pl, dl_dr));
        }
        let mut terms = Vec::new();
        for (traces, pl, dl_dr) in &all_terms_data {
            for (j, tr) in traces.iter().enumerate() {
                terms.push(LossTerm {
                    trace: tr,
                    prefix_len: *pl,
                    weight: dl_dr[j] / 16.0,
                });
            }
        }
        let g = loss_backward(&params, &config, &terms)?;
        if step % 5 == 0 || step < 5 {
            println!(
                "cpo step {step:2}: loss {:.4}, grad norm {:.4}",
                loss_sum / 16.0,
                norm(&g)
            );
        }
        optimizer_step(&mut params, &g, &mut state, &hyper)?;
    }
    Ok(())
}

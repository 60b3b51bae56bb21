//! Automatic ranking of group candidates by embedding similarity.
//!
//! Each candidate continuation is embedded as the mean of the frozen
//! reference model's final hidden states over the continuation positions.
//! Candidates are then ordered by descending cosine similarity to the ground
//! truth's embedding (ties broken by ascending candidate index), producing
//! the permutation consumed by ranked CPO. The ground truth compares against
//! itself, so it always lands at rank 0.

use crate::error::{Error, Result};
use crate::model::{forward_ids, ForwardTrace, ModelConfig, Parameters};
use crate::negatives::PreferenceGroup;
use crate::objectives::Ranking;
use crate::tokens::TokenSequence;

/// Mean-pooled hidden-state embedding of one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// Index of the candidate this embedding belongs to.
    pub source: usize,
}

/// Embeds `cont` (in context `prefix`) as the mean of the model's final
/// hidden states over the continuation positions.
pub fn embed_sequence(
    params: &Parameters,
    config: &ModelConfig,
    prefix: &TokenSequence,
    cont: &TokenSequence,
    source: usize,
) -> Result<EmbeddingVector> {
    let ids = TokenSequence::concat(prefix, cont)?;
    let trace = forward_ids(params, config, &ids)?;
    Ok(embed_from_trace(&trace, prefix.len(), source))
}

/// Same embedding from an existing forward trace of `prefix ⊕ cont`.
pub fn embed_from_trace(trace: &ForwardTrace, prefix_len: usize, source: usize) -> EmbeddingVector {
    assert!(
        prefix_len < trace.seq_len(),
        "prefix {} leaves no continuation positions in a {}-token trace",
        prefix_len,
        trace.seq_len()
    );
    let d = trace.config().d_model;
    let mut values = vec![0.0; d];
    let count = (trace.seq_len() - prefix_len) as f64;
    for t in prefix_len..trace.seq_len() {
        let h = trace.hidden_at(t);
        for i in 0..d {
            values[i] += h[i];
        }
    }
    for v in &mut values {
        *v /= count;
    }
    EmbeddingVector { values, source }
}

/// Cosine similarity clamped to [-1, 1]. A zero vector has no direction;
/// its similarity is defined as 0 (with a warning) so degenerate models
/// rank rather than abort.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.values.iter().zip(&b.values) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!(
            "cosine similarity of a zero embedding (candidates {} and {}): defined as 0",
            a.source,
            b.source
        );
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Orders a group's candidates by descending cosine similarity to the ground
/// truth embedding (`embeddings[0]`), ascending index on ties. The ground
/// truth's own similarity is 1 by definition, so `tau[0] = 0` always.
pub fn rank_by_similarity(
    group: &PreferenceGroup,
    embeddings: &[EmbeddingVector],
) -> Result<Ranking> {
    if embeddings.len() != group.k() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings for a group of {} candidates",
            embeddings.len(),
            group.k()
        )));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.source != i {
            return Err(Error::InvalidRanking(format!(
                "embedding at slot {i} claims source {}",
                e.source
            )));
        }
        if e.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRanking(format!(
                "embedding {i} contains non-finite values"
            )));
        }
    }
    let mut sims = vec![0.0f64; embeddings.len()];
    sims[0] = 1.0; // self-similarity, exact by definition
    for (i, e) in embeddings.iter().enumerate().skip(1) {
        sims[i] = cosine_similarity(e, &embeddings[0])?;
    }
    let mut tau: Vec<usize> = (0..embeddings.len()).collect();
    tau.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ranking::new(tau)
}

/// Computes all candidate embeddings with the reference model and attaches
/// the resulting ranking to the group.
pub fn rank_group(
    ref_params: &Parameters,
    config: &ModelConfig,
    group: &mut PreferenceGroup,
) -> Result<()> {
    group.validate()?;
    let embeddings: Vec<EmbeddingVector> = group
        .candidates
        .iter()
        .enumerate()
        .map(|(i, cont)| embed_sequence(ref_params, config, &group.prefix, cont, i))
        .collect::<Result<_>>()?;
    group.ranking = Some(rank_by_similarity(group, &embeddings)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;
    use crate::negatives::Provenance;
    use crate::tokens::EOS;

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    fn embedding(values: &[f64], source: usize) -> EmbeddingVector {
        EmbeddingVector {
            values: values.to_vec(),
            source,
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_context: 16,
        }
    }

    #[test]
    fn embedding_is_the_mean_of_final_hidden_states() {
        let config = tiny_config();
        let params = init_parameters(&config, 7).unwrap();
        let prefix = seq(&[3, 5]);
        let cont = seq(&[2, 6, EOS]);
        let e = embed_sequence(&params, &config, &prefix, &cont, 0).unwrap();
        let again = embed_sequence(&params, &config, &prefix, &cont, 0).unwrap();
        assert_eq!(e, again);

        // Independent oracle: average the rows of the public hidden-state
        // accessor directly.
        let ids = TokenSequence::concat(&prefix, &cont).unwrap();
        let trace = forward_ids(&params, &config, &ids).unwrap();
        for i in 0..config.d_model {
            let mean = (trace.hidden_at(2)[i] + trace.hidden_at(3)[i] + trace.hidden_at(4)[i]) / 3.0;
            assert!((e.values[i] - mean).abs() < 1e-12);
        }

        // Single-token continuation: the mean of one row is that row.
        let single = seq(&[4]);
        let e1 = embed_sequence(&params, &config, &prefix, &single, 0).unwrap();
        let trace1 = forward_ids(&params, &config, &[3, 5, 4]).unwrap();
        for i in 0..config.d_model {
            assert!((e1.values[i] - trace1.hidden_at(2)[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_matches_hand_arithmetic_and_handles_zero() {
        let v = embedding(&[0.3, -1.2, 0.5], 0);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let x = embedding(&[1.0, 0.0], 0);
        let y = embedding(&[0.0, 1.0], 1);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let z = embedding(&[0.9, 0.1], 1);
        let expected = 0.9 / 0.82f64.sqrt();
        assert!((cosine_similarity(&x, &z).unwrap() - expected).abs() < 1e-12);
        let zero = embedding(&[0.0, 0.0], 2);
        assert_eq!(cosine_similarity(&x, &zero).unwrap(), 0.0);
        let mismatched = embedding(&[1.0], 3);
        assert!(cosine_similarity(&x, &mismatched).is_err());
        // Scale invariance.
        let scaled = embedding(&[9.0, 1.0], 1);
        assert!(
            (cosine_similarity(&x, &scaled).unwrap() - expected).abs() < 1e-12,
            "cosine must ignore positive rescaling"
        );
    }

    fn group_of(k: usize) -> PreferenceGroup {
        let mut provenance = vec![Provenance::Truncation; k];
        provenance[0] = Provenance::GroundTruth;
        PreferenceGroup {
            prefix: seq(&[1, 2]),
            candidates: (0..k).map(|i| seq(&[i + 1, EOS])).collect(),
            provenance,
            ranking: None,
        }
    }

    #[test]
    fn ranking_orders_by_similarity_with_index_tie_break() {
        let group = group_of(3);
        let e = vec![
            embedding(&[1.0, 0.0], 0),
            embedding(&[0.9, 0.1], 1),
            embedding(&[0.0, 1.0], 2),
        ];
        let tau = rank_by_similarity(&group, &e).unwrap();
        assert_eq!(tau.tau(), &[0, 1, 2]);

        // Reversed quality order still puts the ground truth first.
        let e = vec![
            embedding(&[1.0, 0.0], 0),
            embedding(&[0.0, 1.0], 1),
            embedding(&[0.9, 0.1], 2),
        ];
        let tau = rank_by_similarity(&group, &e).unwrap();
        assert_eq!(tau.tau(), &[0, 2, 1]);

        // All-identical embeddings: pure index tie-break.
        let e = vec![
            embedding(&[0.5, 0.5], 0),
            embedding(&[0.5, 0.5], 1),
            embedding(&[0.5, 0.5], 2),
        ];
        let tau = rank_by_similarity(&group, &e).unwrap();
        assert_eq!(tau.tau(), &[0, 1, 2]);
    }

    #[test]
    fn ground_truth_always_ranks_first_even_against_parallel_vectors() {
        let group = group_of(4);
        // Candidate 2 is an exact positive rescaling of the ground truth:
        // its cosine is 1 up to rounding, never above the pinned 1.0.
        let e = vec![
            embedding(&[0.3, -0.7, 0.2], 0),
            embedding(&[0.3, -0.7, 0.2], 1),
            embedding(&[0.6, -1.4, 0.4], 2),
            embedding(&[0.0, 0.0, 0.0], 3),
        ];
        let tau = rank_by_similarity(&group, &e).unwrap();
        assert_eq!(tau.tau()[0], 0, "ground truth must rank first");
        assert_eq!(*tau.tau().last().unwrap(), 3, "zero vector ranks last");
    }

    #[test]
    fn rank_group_attaches_a_valid_permutation_with_gt_first() {
        let config = tiny_config();
        let params = init_parameters(&config, 11).unwrap();
        let mut group = group_of(5);
        rank_group(&params, &config, &mut group).unwrap();
        let ranking = group.ranking.as_ref().unwrap();
        assert_eq!(ranking.k(), 5);
        assert_eq!(ranking.tau()[0], 0);
        // Deterministic.
        let mut again = group_of(5);
        rank_group(&params, &config, &mut again).unwrap();
        assert_eq!(group.ranking, again.ranking);
    }

    #[test]
    fn size_and_source_mismatches_are_rejected() {
        let group = group_of(3);
        let short = vec![embedding(&[1.0], 0), embedding(&[1.0], 1)];
        assert!(rank_by_similarity(&group, &short).is_err());
        let wrong_source = vec![
            embedding(&[1.0, 0.0], 0),
            embedding(&[1.0, 0.0], 2),
            embedding(&[1.0, 0.0], 1),
        ];
        assert!(rank_by_similarity(&group, &wrong_source).is_err());
    }
}

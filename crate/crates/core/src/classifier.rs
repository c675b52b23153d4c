//! Weighted nearest-centroid inference over adapted support features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptation::{forward_features, AdaptedState, AdapterParams};
use crate::episodes::TaskEpisode;
use crate::error::{DetaError, Result};
use crate::numerics::{axpy, cosine_similarity};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet<T> {
    /// One centroid per class, indexed by class id.
    pub centroids: Vec<Vec<T>>,
    /// Image weights the centroids were built with, by sample id.
    pub weight_source: BTreeMap<u64, T>,
    pub similarity: Similarity,
}

/// `centroid_c = (1 / N_c) * sum_{y_i = c} omega_i * f(x_i)`.
pub fn build_classifier<T: Scalar>(
    features: &[Vec<T>],
    labels: &[usize],
    sample_ids: &[u64],
    omega: &[T],
    way: usize,
) -> Result<PrototypeSet<T>> {
    if features.len() != labels.len() || labels.len() != omega.len() || omega.len() != sample_ids.len() {
        return Err(DetaError::invalid("features, labels, ids and weights must align"));
    }
    let dim = features.first().map_or(0, Vec::len);
    let mut centroids = vec![vec![T::zero(); dim]; way];
    let mut counts = vec![0usize; way];
    for ((f, &c), &w) in features.iter().zip(labels).zip(omega) {
        if c >= way {
            return Err(DetaError::invalid("label out of range"));
        }
        axpy(w, f, &mut centroids[c]);
        counts[c] += 1;
    }
    for (c, (centroid, &n)) in centroids.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(DetaError::EmptyClass(c));
        }
        let inv = T::one() / T::of_usize(n);
        centroid.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok(PrototypeSet {
        centroids,
        weight_source: sample_ids.iter().copied().zip(omega.iter().copied()).collect(),
        similarity: Similarity::Cosine,
    })
}

/// Scores against every centroid and the arg-max class; ties go to the
/// lowest class id.
pub fn classify<T: Scalar>(query: &[T], prototypes: &PrototypeSet<T>) -> Result<(usize, Vec<T>)> {
    let scores = prototypes
        .centroids
        .iter()
        .map(|c| match prototypes.similarity {
            Similarity::Cosine => cosine_similarity(query, c),
            Similarity::Euclidean => {
                if query.len() != c.len() {
                    return Err(DetaError::invalid("dimension mismatch"));
                }
                let d2: T = query.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
                Ok(-d2.sqrt())
            }
        })
        .collect::<Result<Vec<T>>>()?;
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    Ok((best, scores))
}

/// Predictions and accuracy of one episode's queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Builds the classifier from adapter-transformed support images with the
/// given weights and scores every query against its ground-truth label.
pub fn evaluate_with<T: Scalar>(
    episode: &TaskEpisode<T>,
    adapter: &AdapterParams<T>,
    omega: &[T],
    similarity: Similarity,
) -> Result<Evaluation> {
    if episode.queries.is_empty() {
        return Err(DetaError::invalid("episode has no queries"));
    }
    let features = episode
        .support
        .iter()
        .map(|s| forward_features(adapter, &s.image_feature))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<u64> = episode.support.iter().map(|s| s.sample_id).collect();
    let mut protos = build_classifier(&features, &episode.support_labels(), &ids, omega, episode.way)?;
    protos.similarity = similarity;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        let f = forward_features(adapter, &q.image_feature)?;
        let (pred, _) = classify(&f, &protos)?;
        if pred == q.ground_truth_label {
            correct += 1;
        }
        predictions.push(pred);
    }
    Ok(Evaluation {
        predictions,
        accuracy: correct as f64 / episode.queries.len() as f64,
    })
}

/// Accuracy of the adapted model with the final accumulated image weights.
pub fn evaluate<T: Scalar>(episode: &TaskEpisode<T>, state: &AdaptedState<T>) -> Result<f64> {
    let ids: Vec<u64> = episode.support.iter().map(|s| s.sample_id).collect();
    let omega = state.accumulator.weights_for(&ids);
    Ok(evaluate_with(episode, &state.adapter, &omega, Similarity::Cosine)?.accuracy)
}

/// Plain nearest-centroid on raw features with unit weights.
pub fn evaluate_baseline<T: Scalar>(episode: &TaskEpisode<T>) -> Result<Evaluation> {
    let omega = vec![T::one(); episode.support.len()];
    evaluate_with(
        episode,
        &AdapterParams::identity(episode.feature_dim),
        &omega,
        Similarity::Cosine,
    )
}

use serde::{Deserialize, Serialize};

use crate::data::{LabeledPairings, PairDataset};
use crate::encoder::{encode_sentences, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::pearson;
use crate::optim::cosine_similarity;
use crate::text::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationMetrics {
    /// Mean cosine of true (A, B) pairs.
    pub mean_cos: f64,
    /// Mean cosine over all mismatched (A_i, B_j), i ≠ j.
    pub mean_cos_random: f64,
    pub retrieval_acc_ab: f64,
    pub retrieval_acc_ba: f64,
}

impl TranslationMetrics {
    pub fn mean_retrieval(&self) -> f64 {
        0.5 * (self.retrieval_acc_ab + self.retrieval_acc_ba)
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Encodes both sides of `val` and scores true-pair similarity and
/// retrieval in both directions.
pub fn validate_translation(params: &EncoderParams, vocab: &Vocab, val: &PairDataset) -> Result<TranslationMetrics> {
    if val.is_empty() {
        return Err(Error::EmptyInput("translation validation set".into()));
    }
    let a = encode_sentences(params, vocab, &val.side_a())?;
    let b = encode_sentences(params, vocab, &val.side_b())?;
    let n = a.len();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = cosine_similarity(&a[i], &b[j])?;
        }
    }
    let mean_cos = (0..n).map(|i| sim[i * n + i]).sum::<f64>() / n as f64;
    let mean_cos_random = if n > 1 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| sim[i * n + j])
            .sum();
        off / (n * (n - 1)) as f64
    } else {
        0.0
    };
    let hits_ab = (0..n)
        .filter(|&i| argmax((0..n).map(|j| sim[i * n + j])) == i)
        .count();
    let hits_ba = (0..n)
        .filter(|&j| argmax((0..n).map(|i| sim[i * n + j])) == j)
        .count();
    Ok(TranslationMetrics {
        mean_cos,
        mean_cos_random,
        retrieval_acc_ab: hits_ab as f64 / n as f64,
        retrieval_acc_ba: hits_ba as f64 / n as f64,
    })
}

/// Predicted cosine of every labeled pairing.
pub fn pairing_similarities(params: &EncoderParams, vocab: &Vocab, pairings: &LabeledPairings) -> Result<Vec<f64>> {
    let a: Vec<&str> = pairings.items().iter().map(|p| p.a.as_str()).collect();
    let b: Vec<&str> = pairings.items().iter().map(|p| p.b.as_str()).collect();
    let ea = encode_sentences(params, vocab, &a)?;
    let eb = encode_sentences(params, vocab, &b)?;
    ea.iter().zip(&eb).map(|(u, v)| cosine_similarity(u, v)).collect()
}

/// Pearson correlation between predicted cosines and the 0/1 labels.
pub fn validate_pearson(params: &EncoderParams, vocab: &Vocab, pairings: &LabeledPairings) -> Result<f64> {
    let (pos, neg) = pairings.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData("pairings need both labels".into()));
    }
    let predicted = pairing_similarities(params, vocab, pairings)?;
    pearson(&predicted, &pairings.labels())
}

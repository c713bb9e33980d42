//! Reward algebra: the weighted guidance score, the embedding-based recall
//! reward, min-max rescaling of candidate scores and the pairwise loss used
//! to train a hallucination reward model.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-candidate rewards and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub r_hal: f64,
    pub r_rec: f64,
    pub combined: f64,
}

impl RewardScore {
    pub fn new(r_hal: f64, r_rec: f64, w: f64) -> Result<Self> {
        Ok(RewardScore {
            r_hal,
            r_rec,
            combined: combine_scores(r_hal, r_rec, w)?,
        })
    }
}

fn check_unit(field: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::out_of_range(field, format!("must lie in [0, 1], got {value}")))
    }
}

/// `w * r_hal + (1 - w) * r_rec`.
pub fn combine_scores(r_hal: f64, r_rec: f64, w: f64) -> Result<f64> {
    check_unit("r_hal", r_hal)?;
    check_unit("r_rec", r_rec)?;
    check_unit("w", w)?;
    Ok((w * r_hal + (1.0 - w) * r_rec).clamp(0.0, 1.0))
}

/// An object named in a caption or reported by a detector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectMention {
    pub surface: String,
    /// Lowercase, singular, synonym-folded label.
    pub canonical: String,
}

impl ObjectMention {
    pub fn new(surface: impl Into<String>, canonical: impl Into<String>) -> Self {
        ObjectMention {
            surface: surface.into(),
            canonical: canonical.into(),
        }
    }

    /// A mention whose surface form is already canonical.
    pub fn canonical(label: impl Into<String>) -> Self {
        let label = label.into().to_lowercase();
        ObjectMention {
            surface: label.clone(),
            canonical: label,
        }
    }
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A word embedding with unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Rescales `values` to unit norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::out_of_range("embedding", "vector has zero or non-finite norm"));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts `values` only if they already have unit norm within `tolerance`.
    pub fn from_unit(values: Vec<f64>, tolerance: f64) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || (norm - 1.0).abs() > tolerance {
            return Err(Error::out_of_range(
                "embedding",
                format!("expected unit norm, got {norm}"),
            ));
        }
        Ok(Embedding(values))
    }

    pub(crate) fn from_checked(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn one_hot(dim: usize, index: usize) -> Self {
        assert!(index < dim, "one-hot index {index} out of dimension {dim}");
        let mut values = vec![0.0; dim];
        values[index] = 1.0;
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

/// Read-only label to embedding lookup.
pub trait EmbeddingLookup {
    fn lookup(&self, label: &str) -> Option<&Embedding>;
}

impl EmbeddingLookup for HashMap<String, Embedding> {
    fn lookup(&self, label: &str) -> Option<&Embedding> {
        self.get(label)
    }
}

impl EmbeddingLookup for BTreeMap<String, Embedding> {
    fn lookup(&self, label: &str) -> Option<&Embedding> {
        self.get(label)
    }
}

/// Largest dot product between `pred` and any reference.
pub fn max_similarity(pred: &Embedding, refs: &[Embedding]) -> Result<f64> {
    let (first, rest) = refs.split_first().ok_or(Error::EmptyReferences)?;
    rest.iter()
        .try_fold(pred.dot(first)?, |best, r| Ok(best.max(pred.dot(r)?)))
}

/// Fraction of reference objects recalled by the predictions.
///
/// Predictions are deduplicated by canonical label; each survivor is a true
/// positive when its best similarity to a reference is strictly above `tau`.
/// The count over `refs.len()` is clamped to [0, 1], and an empty reference
/// list gives 1.0.
pub fn recall_reward<E>(
    refs: &[ObjectMention],
    preds: &[ObjectMention],
    embed: &E,
    tau: f64,
) -> Result<f64>
where
    E: EmbeddingLookup + ?Sized,
{
    if refs.is_empty() {
        return Ok(1.0);
    }
    let lookup = |label: &str| {
        embed
            .lookup(label)
            .ok_or_else(|| Error::EmbeddingUnavailable(label.to_string()))
    };
    let ref_vectors = refs
        .iter()
        .map(|r| lookup(&r.canonical).cloned())
        .collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    let mut true_positives = 0usize;
    for pred in preds {
        if !seen.insert(pred.canonical.as_str()) {
            continue;
        }
        if max_similarity(lookup(&pred.canonical)?, &ref_vectors)? > tau {
            true_positives += 1;
        }
    }
    Ok((true_positives as f64 / refs.len() as f64).clamp(0.0, 1.0))
}

/// `(s - min) / (max - min + epsilon)` over the candidate set.
pub fn minmax_normalize(scores: &[f64], epsilon: f64) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|s| (s - min) / (max - min + epsilon)).collect()
}

pub const DEFAULT_MINMAX_EPSILON: f64 = 1e-12;

/// Rewards assigned to a chosen and a rejected response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub r_plus: f64,
    pub r_minus: f64,
}

/// `-log(sigmoid(margin))`, computed without overflow.
pub fn bradley_terry_nll(margin: f64) -> f64 {
    let x = -margin;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry term plus squared anchors pulling the chosen reward to 1
/// and the rejected reward to 0.
pub fn rm_pairwise_loss(pair: PreferencePair) -> f64 {
    bradley_terry_nll(pair.r_plus - pair.r_minus)
        + (pair.r_plus - 1.0).powi(2)
        + pair.r_minus.powi(2)
}

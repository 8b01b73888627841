//! Probability-vector primitives: softmax, normalization and Shannon entropy.
//!
//! Everything is computed in `f64`, even when the source data was stored as
//! `f32`. Entropies are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a distribution's total mass from 1.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Looser tolerance for distributions handed in from outside (e.g. raw slices).
pub const INPUT_SUM_TOLERANCE: f64 = 1e-6;

/// A next-token probability vector over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    /// Wraps `probs`, checking that it is non-empty, finite, non-negative and
    /// sums to 1 within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_probs(&probs, SUM_TOLERANCE)?;
        Ok(Self(probs))
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::EmptyVector);
        }
        Ok(Self(vec![1.0 / vocab_size as f64; vocab_size]))
    }

    pub fn one_hot(vocab_size: usize, token: usize) -> Result<Self> {
        if token >= vocab_size {
            return Err(Error::DimensionMismatch {
                expected: vocab_size,
                found: token + 1,
            });
        }
        let mut probs = vec![0.0; vocab_size];
        probs[token] = 1.0;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability; ties go to the lowest token id.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(check_probs(&probs, 1e-6).is_ok());
        Self(probs)
    }
}

impl TryFrom<Vec<f64>> for TokenDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<TokenDistribution> for Vec<f64> {
    fn from(d: TokenDistribution) -> Self {
        d.0
    }
}

/// Pre-softmax scores. Only finite values are accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyVector);
        }
        if let Some(index) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(logits))
    }

    pub fn logits(&self) -> &[f64] {
        &self.0
    }
}

/// Shannon entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Entropy(f64);

impl Entropy {
    pub fn new(nats: f64) -> Result<Self> {
        if !nats.is_finite() || nats < 0.0 {
            return Err(Error::InvalidDistribution(format!("bad entropy {nats}")));
        }
        Ok(Self(nats))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn softmax(logits: &LogitVector) -> TokenDistribution {
    let probs = softmax_slice(logits.logits());
    TokenDistribution::from_vec_unchecked(probs)
}

/// Max-subtracted softmax. `-inf` entries come out as exact zeros; at least one
/// entry must be finite.
pub(crate) fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-Σ p ln p`, skipping zero entries. Clamped into `[0, ln V]` to absorb
/// rounding at the endpoints.
pub fn entropy(p: &TokenDistribution) -> Entropy {
    let h: f64 = -p
        .probs()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>();
    let upper = (p.vocab_size() as f64).ln();
    Entropy(h.clamp(0.0, upper))
}

/// Entropy of an unchecked slice; rejects anything that is not a distribution
/// within [`INPUT_SUM_TOLERANCE`].
pub fn entropy_of(probs: &[f64]) -> Result<Entropy> {
    check_probs(probs, INPUT_SUM_TOLERANCE)?;
    Ok(entropy(&TokenDistribution(probs.to_vec())))
}

/// Divides a non-negative vector by its sum.
pub fn normalize(raw: &[f64]) -> Result<TokenDistribution> {
    if raw.is_empty() {
        return Err(Error::EmptyVector);
    }
    if let Some(index) = raw.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if let Some(i) = raw.iter().position(|&x| x < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "negative entry {} at index {i}",
            raw[i]
        )));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(TokenDistribution(raw.iter().map(|&x| x / total).collect()))
}

/// Lowest index among the maxima. NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_probs(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyVector);
    }
    if let Some(index) = probs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if let Some(i) = probs.iter().position(|&x| x < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "negative entry {} at index {i}",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution(format!(
            "entries sum to {total}"
        )));
    }
    Ok(())
}

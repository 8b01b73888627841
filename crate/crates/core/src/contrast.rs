//! Contrast of the standard-layer distribution against a reference, the
//! reliability mask that truncates implausible tokens, and the two orders in
//! which a fused-layer contrast and a noise-reference contrast can be chained.

use serde::{Deserialize, Serialize};

use crate::dist::{argmax, softmax_slice, TokenDistribution};
use crate::error::{Error, Result};

/// Space in which the contrast `(1+a)·x − a·r` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastSpace {
    /// Directly on probabilities; negatives are clamped to zero.
    #[default]
    Probability,
    /// On log-probabilities, followed by a softmax.
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContrastRepr", into = "ContrastRepr")]
pub struct ContrastConfig {
    alpha: f64,
    beta: f64,
    space: ContrastSpace,
    truncation: bool,
}

#[derive(Serialize, Deserialize)]
struct ContrastRepr {
    alpha: f64,
    beta: f64,
    space: ContrastSpace,
    truncation: bool,
}

impl TryFrom<ContrastRepr> for ContrastConfig {
    type Error = Error;
    fn try_from(r: ContrastRepr) -> Result<Self> {
        Self::new(r.alpha, r.beta, r.space, r.truncation)
    }
}

impl From<ContrastConfig> for ContrastRepr {
    fn from(c: ContrastConfig) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            space: c.space,
            truncation: c.truncation,
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.1;

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            space: ContrastSpace::Probability,
            truncation: true,
        }
    }
}

impl ContrastConfig {
    pub fn new(alpha: f64, beta: f64, space: ContrastSpace, truncation: bool) -> Result<Self> {
        check_alpha("alpha", alpha)?;
        check_beta(beta)?;
        Ok(Self {
            alpha,
            beta,
            space,
            truncation,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn space(&self) -> ContrastSpace {
        self.space
    }

    pub fn truncation(&self) -> bool {
        self.truncation
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(alpha, self.beta, self.space, self.truncation)
    }

    pub fn with_truncation(self, truncation: bool) -> Self {
        Self { truncation, ..self }
    }

    pub fn with_space(self, space: ContrastSpace) -> Self {
        Self { space, ..self }
    }
}

pub(crate) fn check_alpha(name: &str, alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {alpha}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidConfig(format!("beta must be in (0, 1], got {beta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastResult {
    pub p_valid: TokenDistribution,
    /// Token ids allowed by the reliability mask, ascending.
    pub kept_support: Vec<usize>,
    /// Contrast scores before clamping, masking and renormalization.
    pub raw_scores: Vec<f64>,
    /// Set when nothing survived and `p_valid` fell back to the truncated original.
    pub fallback: bool,
}

/// Tokens whose original probability is at least `beta` times the maximum.
/// Always contains the argmax.
pub fn reliability_mask(p_ori: &TokenDistribution, beta: f64) -> Result<Vec<usize>> {
    check_beta(beta)?;
    let threshold = beta * p_ori.max();
    Ok(p_ori
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Zeroes everything outside `mask`, clamps negatives, renormalizes.
pub fn apply_mask(raw_scores: &[f64], mask: &[usize]) -> Result<TokenDistribution> {
    if mask.is_empty() {
        return Err(Error::InvalidConfig("mask is empty".into()));
    }
    let mut out = vec![0.0; raw_scores.len()];
    for &t in mask {
        let s = *raw_scores.get(t).ok_or(Error::DimensionMismatch {
            expected: raw_scores.len(),
            found: t + 1,
        })?;
        if s > 0.0 {
            out[t] = s;
        }
    }
    let total: f64 = out.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(TokenDistribution::from_vec_unchecked(
        out.into_iter().map(|x| x / total).collect(),
    ))
}

/// Log-space counterpart of [`apply_mask`]: softmax over the masked scores.
fn apply_mask_logit(raw_scores: &[f64], mask: &[usize]) -> Result<TokenDistribution> {
    let mut masked = vec![f64::NEG_INFINITY; raw_scores.len()];
    for &t in mask {
        masked[t] = raw_scores[t];
    }
    if masked.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::ZeroMass);
    }
    Ok(TokenDistribution::from_vec_unchecked(softmax_slice(&masked)))
}

/// `(1 + coef)·input − coef·reference`, elementwise.
pub fn contrast_operator(input: &[f64], reference: &[f64], coef: f64) -> Vec<f64> {
    input
        .iter()
        .zip(reference)
        .map(|(x, r)| (1.0 + coef) * x - coef * r)
        .collect()
}

/// Log-probabilities for the logit-space contrast. Zero probabilities in the
/// scored distribution stay at `-inf`; in a reference they are floored so the
/// contrast stays finite.
pub(crate) fn log_scores(p: &TokenDistribution) -> Vec<f64> {
    p.probs()
        .iter()
        .map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY })
        .collect()
}

pub(crate) fn log_reference(p: &TokenDistribution) -> Vec<f64> {
    p.probs().iter().map(|&x| x.max(f64::MIN_POSITIVE).ln()).collect()
}

fn check_dims(a: &TokenDistribution, b: &TokenDistribution) -> Result<()> {
    if a.vocab_size() != b.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: a.vocab_size(),
            found: b.vocab_size(),
        });
    }
    Ok(())
}

/// Contrasts `p_ori` against `p_ref` and applies the reliability mask.
pub fn contrast(
    p_ori: &TokenDistribution,
    p_ref: &TokenDistribution,
    cfg: &ContrastConfig,
) -> Result<ContrastResult> {
    check_dims(p_ori, p_ref)?;
    let raw_scores = match cfg.space {
        ContrastSpace::Probability => contrast_operator(p_ori.probs(), p_ref.probs(), cfg.alpha),
        ContrastSpace::Logit => {
            contrast_operator(&log_scores(p_ori), &log_reference(p_ref), cfg.alpha)
        }
    };
    finalize(p_ori, raw_scores, cfg)
}

/// Turns raw contrast scores into the final distribution: mask (if enabled),
/// clamp or softmax depending on the space, renormalize, and fall back to the
/// truncated original when nothing survives.
pub fn finalize(
    p_ori: &TokenDistribution,
    raw_scores: Vec<f64>,
    cfg: &ContrastConfig,
) -> Result<ContrastResult> {
    if raw_scores.len() != p_ori.vocab_size() {
        return Err(Error::DimensionMismatch {
            expected: p_ori.vocab_size(),
            found: raw_scores.len(),
        });
    }
    let kept_support = if cfg.truncation {
        reliability_mask(p_ori, cfg.beta)?
    } else {
        (0..p_ori.vocab_size()).collect()
    };
    let attempt = match cfg.space {
        ContrastSpace::Probability => apply_mask(&raw_scores, &kept_support),
        ContrastSpace::Logit => apply_mask_logit(&raw_scores, &kept_support),
    };
    let (p_valid, fallback) = match attempt {
        Ok(p) => (p, false),
        Err(Error::ZeroMass) => (apply_mask(p_ori.probs(), &kept_support)?, true),
        Err(e) => return Err(e),
    };
    debug_assert!(kept_support.contains(&argmax(p_ori.probs())));
    Ok(ContrastResult {
        p_valid,
        kept_support,
        raw_scores,
        fallback,
    })
}

/// Order in which the noise-reference and fused-layer contrasts are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionOrder {
    /// Noise-reference contrast first, fused-layer contrast on its output.
    VcdThenValid,
    /// Fused-layer contrast first, noise-reference contrast on its output.
    ValidThenVcd,
}

/// Raw composed probability-space scores, not renormalized.
///
/// `alpha` is the noise-reference coefficient and `alpha_prime` the fused-layer
/// one. The two orders differ elementwise by exactly
/// `alpha · alpha_prime · |p_ent − p_noi|`.
pub fn compose_decode(
    p_ori: &TokenDistribution,
    p_ent: &TokenDistribution,
    p_noi: &TokenDistribution,
    order: CompositionOrder,
    alpha: f64,
    alpha_prime: f64,
) -> Result<Vec<f64>> {
    check_dims(p_ori, p_ent)?;
    check_dims(p_ori, p_noi)?;
    check_alpha("alpha", alpha)?;
    check_alpha("alpha_prime", alpha_prime)?;
    Ok(compose_scores(
        p_ori.probs(),
        p_ent.probs(),
        p_noi.probs(),
        order,
        alpha,
        alpha_prime,
    ))
}

pub(crate) fn compose_scores(
    ori: &[f64],
    ent: &[f64],
    noi: &[f64],
    order: CompositionOrder,
    alpha: f64,
    alpha_prime: f64,
) -> Vec<f64> {
    match order {
        CompositionOrder::VcdThenValid => {
            let inner = contrast_operator(ori, noi, alpha);
            contrast_operator(&inner, ent, alpha_prime)
        }
        CompositionOrder::ValidThenVcd => {
            let inner = contrast_operator(ori, ent, alpha_prime);
            contrast_operator(&inner, noi, alpha)
        }
    }
}

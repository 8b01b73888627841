//! Per-step decoding over a recorded trace.
//!
//! Replay is teacher-forced: the context at step `t` is whatever the recording
//! model produced, so every step's per-layer distributions are available no
//! matter which token the decoder picks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{
    check_alpha, compose_scores, contrast, finalize, log_reference, log_scores, CompositionOrder,
    ContrastConfig, ContrastSpace,
};
use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::fusion::{
    bucket_entropies, fusion_weights, reference_distribution, sort_by_entropy, CandidateBucket,
    LayerDistributions, LayerId,
};
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Vanilla,
    Valid,
    Vcd,
    VcdThenValid,
    ValidThenVcd,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 5] = [
        Self::Vanilla,
        Self::Valid,
        Self::Vcd,
        Self::VcdThenValid,
        Self::ValidThenVcd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Valid => "valid",
            Self::Vcd => "vcd",
            Self::VcdThenValid => "vcd_then_valid",
            Self::ValidThenVcd => "valid_then_vcd",
        }
    }

    pub fn needs_noise(self) -> bool {
        matches!(self, Self::Vcd | Self::VcdThenValid | Self::ValidThenVcd)
    }

    pub fn needs_fusion(self) -> bool {
        matches!(self, Self::Valid | Self::VcdThenValid | Self::ValidThenVcd)
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    /// Argmax, ties to the lowest token id.
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidConfig {
    pub contrast: ContrastConfig,
    /// Coefficient for the noise-reference contrast (`vcd` and composed modes).
    pub vcd_alpha: f64,
    /// Number of bucket layers to fuse; `None` fuses the whole bucket.
    pub k: Option<usize>,
    pub bucket: CandidateBucket,
    pub mode: DecodeMode,
    pub sampler: Sampler,
    pub seed: u64,
}

impl ValidConfig {
    /// Defaults: probability-space contrast with alpha 1, beta 0.1, truncation
    /// on, whole-bucket fusion, greedy sampling.
    pub fn new(bucket: CandidateBucket, mode: DecodeMode) -> Self {
        Self {
            contrast: ContrastConfig::default(),
            vcd_alpha: crate::contrast::DEFAULT_ALPHA,
            k: None,
            bucket,
            mode,
            sampler: Sampler::Greedy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha("vcd_alpha", self.vcd_alpha)?;
        if self.k == Some(0) {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if let Sampler::Temperature { tau } = self.sampler {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")));
            }
        }
        Ok(())
    }

    fn effective_k(&self) -> usize {
        self.k.unwrap_or(self.bucket.len()).min(self.bucket.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntropy {
    pub layer: LayerId,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedLayer {
    pub layer: LayerId,
    pub entropy: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Entropy of every bucket layer, bucket order. Empty when no fusion ran.
    pub candidate_entropies: Vec<LayerEntropy>,
    /// Fused layers, highest entropy first.
    pub selected: Vec<SelectedLayer>,
    pub kept_support: usize,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub question_id: String,
    pub mode: DecodeMode,
    pub emitted_tokens: Vec<u32>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub config: ValidConfig,
}

/// Everything computed for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub distribution: TokenDistribution,
    /// Contrast scores before masking; `None` in vanilla mode.
    pub raw_scores: Option<Vec<f64>>,
    /// Fused reference distribution, when fusion ran.
    pub fused_reference: Option<TokenDistribution>,
    pub diagnostics: StepDiagnostics,
}

struct Fused {
    reference: TokenDistribution,
    candidate_entropies: Vec<LayerEntropy>,
    selected: Vec<SelectedLayer>,
}

fn fuse(per_layer: &LayerDistributions, cfg: &ValidConfig) -> Result<Fused> {
    let scored = bucket_entropies(per_layer, &cfg.bucket)?;
    let candidate_entropies = scored
        .iter()
        .map(|(l, h)| LayerEntropy {
            layer: *l,
            entropy: h.value(),
        })
        .collect();
    let mut ranked = scored;
    sort_by_entropy(&mut ranked);
    ranked.truncate(cfg.effective_k());
    let weights = fusion_weights(&ranked)?;
    let reference = reference_distribution(per_layer, &weights)?;
    let selected = ranked
        .iter()
        .zip(weights.iter())
        .map(|((l, h), (_, w))| SelectedLayer {
            layer: *l,
            entropy: h.value(),
            weight: w,
        })
        .collect();
    Ok(Fused {
        reference,
        candidate_entropies,
        selected,
    })
}

fn check_compatible(trace: &Trace, cfg: &ValidConfig) -> Result<()> {
    cfg.validate()?;
    let header = &trace.header;
    if cfg.bucket.standard_layer().0 != header.standard_layer {
        return Err(Error::InvalidConfig(format!(
            "bucket standard layer {} differs from trace standard layer {}",
            cfg.bucket.standard_layer(),
            header.standard_layer
        )));
    }
    if cfg.mode.needs_fusion() {
        if let Some(l) = cfg.bucket.layers().iter().find(|l| header.row_of(**l).is_none()) {
            return Err(Error::MissingLayer(l.0));
        }
    }
    if cfg.mode.needs_noise() && !header.has_noise_channel {
        return Err(Error::MissingNoiseChannel(cfg.mode.as_str()));
    }
    Ok(())
}

/// Runs one step of `cfg.mode` on `trace`.
pub fn decode_step(trace: &Trace, step: usize, cfg: &ValidConfig) -> Result<StepOutput> {
    check_compatible(trace, cfg)?;
    let p_ori = trace.standard_distribution(step)?;
    let noise = || -> Result<TokenDistribution> {
        trace
            .noise_distribution(step)?
            .ok_or(Error::MissingNoiseChannel(cfg.mode.as_str()))
    };

    let mut diagnostics = StepDiagnostics {
        candidate_entropies: Vec::new(),
        selected: Vec::new(),
        kept_support: p_ori.vocab_size(),
        fallback: false,
    };

    let fused = if cfg.mode.needs_fusion() {
        let per_layer = trace.layer_distributions(step)?;
        Some(fuse(&per_layer, cfg)?)
    } else {
        None
    };

    let result = match cfg.mode {
        DecodeMode::Vanilla => None,
        DecodeMode::Valid => {
            let f = fused.as_ref().expect("fusion ran");
            Some(contrast(&p_ori, &f.reference, &cfg.contrast)?)
        }
        DecodeMode::Vcd => {
            let vcd = cfg.contrast.with_alpha(cfg.vcd_alpha)?;
            Some(contrast(&p_ori, &noise()?, &vcd)?)
        }
        DecodeMode::VcdThenValid | DecodeMode::ValidThenVcd => {
            let order = if cfg.mode == DecodeMode::VcdThenValid {
                CompositionOrder::VcdThenValid
            } else {
                CompositionOrder::ValidThenVcd
            };
            let p_ent = &fused.as_ref().expect("fusion ran").reference;
            let p_noi = noise()?;
            let raw = match cfg.contrast.space() {
                ContrastSpace::Probability => compose_scores(
                    p_ori.probs(),
                    p_ent.probs(),
                    p_noi.probs(),
                    order,
                    cfg.vcd_alpha,
                    cfg.contrast.alpha(),
                ),
                ContrastSpace::Logit => compose_scores(
                    &log_scores(&p_ori),
                    &log_reference(p_ent),
                    &log_reference(&p_noi),
                    order,
                    cfg.vcd_alpha,
                    cfg.contrast.alpha(),
                ),
            };
            Some(finalize(&p_ori, raw, &cfg.contrast)?)
        }
    };

    let (distribution, raw_scores) = match result {
        Some(r) => {
            diagnostics.kept_support = r.kept_support.len();
            diagnostics.fallback = r.fallback;
            (r.p_valid, Some(r.raw_scores))
        }
        None => (p_ori, None),
    };
    let fused_reference = fused.map(|f| {
        diagnostics.candidate_entropies = f.candidate_entropies;
        diagnostics.selected = f.selected;
        f.reference
    });
    Ok(StepOutput {
        distribution,
        raw_scores,
        fused_reference,
        diagnostics,
    })
}

/// Decodes every step of `trace` under `cfg`.
pub fn decode_question(trace: &Trace, cfg: &ValidConfig) -> Result<DecodeOutcome> {
    check_compatible(trace, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(trace.question_id().as_bytes()));
    let mut emitted = Vec::with_capacity(trace.steps.len());
    let mut diagnostics = Vec::with_capacity(trace.steps.len());
    for t in 0..trace.steps.len() {
        let out = decode_step(trace, t, cfg)?;
        let token = match cfg.sampler {
            Sampler::Greedy => out.distribution.argmax(),
            Sampler::Temperature { tau } => sample(&out.distribution, tau, &mut rng),
        };
        emitted.push(token as u32);
        diagnostics.push(out.diagnostics);
    }
    Ok(DecodeOutcome {
        question_id: trace.question_id().to_string(),
        mode: cfg.mode,
        emitted_tokens: emitted,
        diagnostics,
        config: cfg.clone(),
    })
}

/// Draws from `p^(1/tau)`, renormalized. Zero-probability tokens are never drawn.
fn sample(p: &TokenDistribution, tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let logs: Vec<f64> = p
        .probs()
        .iter()
        .map(|&x| if x > 0.0 { x.ln() / tau } else { f64::NEG_INFINITY })
        .collect();
    let weights = crate::dist::softmax_slice(&logs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

//! Entropy-guided layer selection and fusion of hidden-layer distributions
//! into a single reference distribution.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dist::{entropy, Entropy, TokenDistribution};
use crate::error::{Error, Result};

/// 1-based index of a vision-encoder layer.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LayerId(pub u16);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Per-layer next-token distributions for one decode step.
pub type LayerDistributions = BTreeMap<LayerId, TokenDistribution>;

/// Candidate layers for fusion, plus the standard output layer they are
/// contrasted against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BucketRepr", into = "BucketRepr")]
pub struct CandidateBucket {
    layers: Vec<LayerId>,
    standard_layer: LayerId,
}

#[derive(Serialize, Deserialize)]
struct BucketRepr {
    layers: Vec<LayerId>,
    standard_layer: LayerId,
}

impl TryFrom<BucketRepr> for CandidateBucket {
    type Error = Error;
    fn try_from(r: BucketRepr) -> Result<Self> {
        Self::new(r.layers, r.standard_layer)
    }
}

impl From<CandidateBucket> for BucketRepr {
    fn from(b: CandidateBucket) -> Self {
        Self {
            layers: b.layers,
            standard_layer: b.standard_layer,
        }
    }
}

impl CandidateBucket {
    pub fn new(layers: Vec<LayerId>, standard_layer: LayerId) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidBucket("no layers".into()));
        }
        if layers.iter().any(|l| l.0 == 0) {
            return Err(Error::InvalidBucket("layer ids are 1-based".into()));
        }
        if !layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidBucket(
                "layers must be strictly increasing".into(),
            ));
        }
        if layers.contains(&standard_layer) {
            return Err(Error::InvalidBucket(format!(
                "bucket contains standard layer {standard_layer}"
            )));
        }
        Ok(Self {
            layers,
            standard_layer,
        })
    }

    pub fn layers(&self) -> &[LayerId] {
        &self.layers
    }

    pub fn standard_layer(&self) -> LayerId {
        self.standard_layer
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Built-in bucket presets: `(name, candidate layers, standard layer)`.
///
/// The Qwen-VL list omits layer 49 because that layer is the encoder output the
/// model consumes.
pub const PRESETS: &[(&str, &[u16], u16)] = &[
    ("llava-v1.5", &[13, 15, 17, 19, 21, 23, 25], 24),
    ("instructblip", &[29, 31, 33, 35, 37, 39], 38),
    ("qwen-vl", &[45, 46, 47, 48], 49),
];

pub fn preset(name: &str) -> Option<CandidateBucket> {
    PRESETS.iter().find(|(n, _, _)| *n == name).map(|(_, layers, std)| {
        CandidateBucket::new(layers.iter().map(|&l| LayerId(l)).collect(), LayerId(*std))
            .expect("built-in presets are valid")
    })
}

/// Parses a layer list such as `13,15,17` or `13-17` (inclusive range) or a
/// mix of both.
pub fn parse_layer_list(text: &str) -> Result<Vec<LayerId>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parse = |s: &str| {
            s.trim()
                .parse::<u16>()
                .map_err(|_| Error::InvalidBucket(format!("bad layer id {s:?}")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(Error::InvalidBucket(format!("empty range {part}")));
                }
                out.extend((a..=b).map(LayerId));
            }
            None => out.push(LayerId(parse(part)?)),
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidBucket("empty layer list".into()));
    }
    Ok(out)
}

/// Reads bucket presets from plain text, one per line:
///
/// ```text
/// # comment
/// llava-v1.5 = 13,15,17,19,21,23,25 ; 24
/// ```
///
/// The part after `;` is the standard layer.
pub fn parse_presets(text: &str) -> Result<Vec<(String, CandidateBucket)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let (name, rest) = line
            .split_once('=')
            .ok_or_else(|| perr("expected `name = layers ; standard`".into()))?;
        let (layers, standard) = rest
            .split_once(';')
            .ok_or_else(|| perr("missing `; standard_layer`".into()))?;
        let layers = parse_layer_list(layers).map_err(|e| perr(e.to_string()))?;
        let standard = standard
            .trim()
            .parse::<u16>()
            .map_err(|_| perr(format!("bad standard layer {:?}", standard.trim())))?;
        let bucket =
            CandidateBucket::new(layers, LayerId(standard)).map_err(|e| perr(e.to_string()))?;
        out.push((name.trim().to_string(), bucket));
    }
    Ok(out)
}

/// Softmax-of-entropy weights over the selected layers, in selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(Vec<(LayerId, f64)>);

impl FusionWeights {
    pub fn iter(&self) -> impl Iterator<Item = (LayerId, f64)> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, layer: LayerId) -> Option<f64> {
        self.0.iter().find(|(l, _)| *l == layer).map(|(_, w)| *w)
    }
}

/// Entropy of every bucket layer, in bucket order.
pub fn bucket_entropies(
    per_layer: &LayerDistributions,
    bucket: &CandidateBucket,
) -> Result<Vec<(LayerId, Entropy)>> {
    bucket
        .layers()
        .iter()
        .map(|&l| {
            per_layer
                .get(&l)
                .map(|d| (l, entropy(d)))
                .ok_or(Error::MissingLayer(l.0))
        })
        .collect()
}

/// The `k` bucket layers with the highest entropy, highest first. Equal
/// entropies are broken toward the deeper layer. `k` larger than the bucket is
/// clamped.
pub fn select_top_k(
    per_layer: &LayerDistributions,
    bucket: &CandidateBucket,
    k: usize,
) -> Result<Vec<(LayerId, Entropy)>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut scored = bucket_entropies(per_layer, bucket)?;
    sort_by_entropy(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

pub(crate) fn sort_by_entropy(scored: &mut [(LayerId, Entropy)]) {
    scored.sort_by(|a, b| {
        b.1.value()
            .total_cmp(&a.1.value())
            .then_with(|| b.0.cmp(&a.0))
    });
}

/// `w_i = exp(H_i) / Σ_j exp(H_j)`.
pub fn fusion_weights(selected: &[(LayerId, Entropy)]) -> Result<FusionWeights> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let max = selected
        .iter()
        .map(|(_, h)| h.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|(_, h)| (h.value() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(FusionWeights(
        selected
            .iter()
            .zip(exps)
            .map(|((l, _), e)| (*l, e / total))
            .collect(),
    ))
}

/// Convex combination `Σ w_i · P_i` of the weighted layers' distributions.
pub fn reference_distribution(
    per_layer: &LayerDistributions,
    weights: &FusionWeights,
) -> Result<TokenDistribution> {
    let mut acc: Option<Vec<f64>> = None;
    for (layer, w) in weights.iter() {
        let d = per_layer.get(&layer).ok_or(Error::MissingLayer(layer.0))?;
        match acc.as_mut() {
            None => acc = Some(d.probs().iter().map(|p| w * p).collect()),
            Some(acc) => {
                if acc.len() != d.vocab_size() {
                    return Err(Error::DimensionMismatch {
                        expected: acc.len(),
                        found: d.vocab_size(),
                    });
                }
                for (a, p) in acc.iter_mut().zip(d.probs()) {
                    *a += w * p;
                }
            }
        }
    }
    let acc = acc.ok_or(Error::EmptySelection)?;
    TokenDistribution::new(acc)
}

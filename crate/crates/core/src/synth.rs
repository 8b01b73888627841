//! Synthetic traces that mimic encoding distortion in a vision encoder.
//!
//! Each generated question has a correct and a wrong answer token. Early
//! "clean" layers put most of their mass on the correct token with moderate
//! entropy. Later "distorting" layers spread their mass (high entropy) and
//! lean toward the wrong token. The standard layer is the clean signal blended
//! toward a low-entropy wrong-leaning drift by the question's distortion `d`.
//!
//! With the default profile the answer-token masses of the standard layer are
//! `0.28 + 0.26 d` (wrong) and `0.52 - 0.16 d` (correct), so vanilla decoding
//! flips once `d > 4/7`. Under the default contrast config the fused contrast
//! brings the correct answer back over `d ∈ (4/7, 1]` when the distorting layers
//! give at least 0.9 of their answer mass to the wrong token; with the default
//! `(0.55, 0.98)` share range recovery is reliable up to `d = 0.6` and degrades
//! beyond. The synth tests and the acceptance suite check this band by brute
//! force.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::Vocabulary;
use crate::dist::argmax;
use crate::error::{Error, Result};
use crate::trace::{
    row_distribution, GoldLabel, QuestionMeta, SamplingSplit, StepRecord, Storage, Trace,
    TraceHeader, FORMAT_VERSION,
};

/// Shape of the per-layer distributions. "Focus" is the mass on the two answer
/// tokens; the remainder is spread over the other tokens. "Wrong share" is the
/// fraction of the focus that goes to the wrong token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub clean_focus: f64,
    pub clean_wrong_share: f64,
    pub distorted_focus: f64,
    /// Drawn uniformly per question from this range.
    pub distorted_wrong_share: (f64, f64),
    pub drift_focus: f64,
    pub drift_wrong_share: f64,
}

impl Default for EntropyProfile {
    fn default() -> Self {
        Self {
            clean_focus: 0.8,
            clean_wrong_share: 0.35,
            distorted_focus: 0.5,
            distorted_wrong_share: (0.55, 0.98),
            drift_focus: 0.9,
            drift_wrong_share: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub question_id: String,
    pub vocab_size: u32,
    pub layer_ids: Vec<u16>,
    pub standard_layer: u16,
    pub correct_token: u32,
    pub wrong_token: u32,
    /// Token every layer agrees on at the second step; `None` for one-step traces.
    pub closing_token: Option<u32>,
    pub distortion: f64,
    /// Half-width of the uniform jitter added to `distortion` per question.
    pub distortion_jitter: f64,
    /// The first `n_clean_layers` non-standard layers are clean; the rest distort.
    pub n_clean_layers: usize,
    pub profile: EntropyProfile,
    pub noise_channel: bool,
    pub storage: Storage,
}

impl SynthSpec {
    /// A 25-layer encoder with the standard layer at 24, clean layers 1..=12.
    pub fn llava_like(question_id: impl Into<String>, correct_token: u32, wrong_token: u32) -> Self {
        Self {
            question_id: question_id.into(),
            vocab_size: 64,
            layer_ids: (1..=25).collect(),
            standard_layer: 24,
            correct_token,
            wrong_token,
            closing_token: Some(2),
            distortion: 0.6,
            distortion_jitter: 0.0,
            n_clean_layers: 12,
            profile: EntropyProfile::default(),
            noise_channel: false,
            storage: Storage::Logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let v = self.vocab_size;
        for (name, tok) in [("correct_token", Some(self.correct_token)), ("wrong_token", Some(self.wrong_token)), ("closing_token", self.closing_token)] {
            if let Some(t) = tok {
                if t >= v {
                    return bad(format!("{name} {t} outside vocab of {v}"));
                }
            }
        }
        if self.correct_token == self.wrong_token {
            return bad("correct and wrong token coincide".into());
        }
        if self
            .closing_token
            .is_some_and(|c| c == self.correct_token || c == self.wrong_token)
        {
            return bad("closing token collides with an answer token".into());
        }
        if v < 3 {
            return bad("vocab needs at least 3 tokens".into());
        }
        if !(0.0..=1.0).contains(&self.distortion) {
            return bad(format!("distortion {} outside [0, 1]", self.distortion));
        }
        if !(self.distortion_jitter >= 0.0 && self.distortion_jitter.is_finite()) {
            return bad("distortion_jitter must be >= 0".into());
        }
        if !self.layer_ids.contains(&self.standard_layer) {
            return bad("standard layer not among layer ids".into());
        }
        if self.n_clean_layers > self.layer_ids.len() - 1 {
            return bad("more clean layers than non-standard layers".into());
        }
        let p = &self.profile;
        for (name, x) in [
            ("clean_focus", p.clean_focus),
            ("distorted_focus", p.distorted_focus),
            ("drift_focus", p.drift_focus),
        ] {
            if !(x > 0.0 && x < 1.0) {
                return bad(format!("{name} must be in (0, 1)"));
            }
        }
        let (lo, hi) = p.distorted_wrong_share;
        for (name, x) in [
            ("clean_wrong_share", p.clean_wrong_share),
            ("drift_wrong_share", p.drift_wrong_share),
            ("distorted_wrong_share.0", lo),
            ("distorted_wrong_share.1", hi),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        if lo > hi {
            return bad("distorted_wrong_share range is reversed".into());
        }
        Ok(())
    }
}

/// Keeps every answer-token probability strictly positive so log storage stays finite.
const SHARE_CLAMP: (f64, f64) = (0.02, 0.98);

struct Builder<'a> {
    spec: &'a SynthSpec,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// `1 - focus` spread over the non-answer tokens with ±50% jitter.
    fn filler(&mut self, mass: f64, reserved: &[u32]) -> Vec<f64> {
        let v = self.spec.vocab_size as usize;
        let mut f: Vec<f64> = (0..v)
            .map(|i| {
                if reserved.contains(&(i as u32)) {
                    0.0
                } else {
                    self.rng.gen_range(0.5..1.5)
                }
            })
            .collect();
        let total: f64 = f.iter().sum();
        for x in &mut f {
            *x *= mass / total;
        }
        f
    }

    fn answer_layer(&mut self, focus: f64, wrong_share: f64) -> Vec<f64> {
        let s = self.spec;
        let focus = focus.clamp(0.01, 0.99);
        let wrong_share = wrong_share.clamp(SHARE_CLAMP.0, SHARE_CLAMP.1);
        let mut p = self.filler(1.0 - focus, &[s.correct_token, s.wrong_token]);
        p[s.wrong_token as usize] = focus * wrong_share;
        p[s.correct_token as usize] = focus * (1.0 - wrong_share);
        p
    }

    fn closing_layer(&mut self, token: u32, focus: f64) -> Vec<f64> {
        let mut p = self.filler(1.0 - focus, &[token]);
        p[token as usize] = focus;
        p
    }

    fn encode(&self, p: &[f64]) -> Vec<f32> {
        match self.spec.storage {
            Storage::Logits => p.iter().map(|&x| x.ln() as f32).collect(),
            Storage::Probs => {
                let narrow: Vec<f32> = p.iter().map(|&x| x as f32).collect();
                narrow
            }
        }
    }
}

/// Generates one trace. Identical `spec` and `seed` give identical bytes.
pub fn synth_trace(spec: &SynthSpec, seed: u64) -> Result<Trace> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let prof = spec.profile;
    let jitter = spec.distortion_jitter;
    let d_q = if jitter > 0.0 {
        (spec.distortion + b.rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0)
    } else {
        spec.distortion
    };
    let (lo, hi) = prof.distorted_wrong_share;
    let distorted_share = if hi > lo { b.rng.gen_range(lo..=hi) } else { lo };

    let mut rows = Vec::with_capacity(spec.layer_ids.len());
    let mut seen_non_standard = 0;
    for &layer in &spec.layer_ids {
        let p = if layer == spec.standard_layer {
            let clean = b.answer_layer(prof.clean_focus, prof.clean_wrong_share);
            let drift = b.answer_layer(prof.drift_focus, prof.drift_wrong_share);
            clean
                .iter()
                .zip(&drift)
                .map(|(c, w)| (1.0 - d_q) * c + d_q * w)
                .collect()
        } else {
            seen_non_standard += 1;
            if seen_non_standard <= spec.n_clean_layers {
                let focus = prof.clean_focus * b.rng.gen_range(0.9..1.1);
                let share = prof.clean_wrong_share * b.rng.gen_range(0.8..1.2);
                b.answer_layer(focus, share)
            } else {
                let focus = prof.distorted_focus * b.rng.gen_range(0.9..1.1);
                b.answer_layer(focus, distorted_share)
            }
        };
        rows.push(p);
    }
    let noise = spec
        .noise_channel
        .then(|| b.answer_layer(0.4, 0.7));

    let mut steps = vec![finish_step(&b, &rows, noise.as_deref(), spec)?];

    if let Some(tok) = spec.closing_token {
        let rows: Vec<Vec<f64>> = spec
            .layer_ids
            .iter()
            .map(|_| {
                let focus = 0.9 * b.rng.gen_range(0.95..1.0);
                b.closing_layer(tok, focus)
            })
            .collect();
        let noise = spec.noise_channel.then(|| b.closing_layer(tok, 0.6));
        steps.push(finish_step(&b, &rows, noise.as_deref(), spec)?);
    }

    let header = TraceHeader {
        version: FORMAT_VERSION,
        vocab_size: spec.vocab_size,
        layer_ids: spec.layer_ids.clone(),
        standard_layer: spec.standard_layer,
        step_count: steps.len() as u32,
        has_noise_channel: spec.noise_channel,
        storage: spec.storage,
        question_id: spec.question_id.clone(),
    };
    Ok(Trace { header, steps })
}

fn finish_step(
    b: &Builder<'_>,
    rows: &[Vec<f64>],
    noise: Option<&[f64]>,
    spec: &SynthSpec,
) -> Result<StepRecord> {
    let per_layer: Vec<Vec<f32>> = rows.iter().map(|p| b.encode(p)).collect();
    let std_row = spec
        .layer_ids
        .iter()
        .position(|&l| l == spec.standard_layer)
        .expect("validated");
    // the recording model's own greedy choice, from what is actually stored
    let chosen = argmax(row_distribution(&per_layer[std_row], spec.storage)?.probs()) as u32;
    Ok(StepRecord {
        per_layer,
        noise_ref: noise.map(|n| b.encode(n)),
        chosen_token: chosen,
    })
}

pub const YES_TOKEN: u32 = 0;
pub const NO_TOKEN: u32 = 1;
pub const PERIOD_TOKEN: u32 = 2;

/// Settings for a yes/no corpus of synthetic traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_questions: usize,
    pub vocab_size: u32,
    pub layer_ids: Vec<u16>,
    pub standard_layer: u16,
    pub distortion: f64,
    pub distortion_jitter: f64,
    pub n_clean_layers: usize,
    pub profile: EntropyProfile,
    pub noise_channel: bool,
    pub storage: Storage,
    pub dataset_tag: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_questions: 200,
            vocab_size: 64,
            layer_ids: (1..=25).collect(),
            standard_layer: 24,
            distortion: 0.6,
            distortion_jitter: 0.25,
            n_clean_layers: 12,
            profile: EntropyProfile::default(),
            noise_channel: true,
            storage: Storage::Logits,
            dataset_tag: "synthetic-pope".into(),
        }
    }
}

pub struct SynthCorpus {
    pub traces: Vec<Trace>,
    pub questions: Vec<QuestionMeta>,
    pub vocab: Vocabulary,
}

const OBJECTS: &[&str] = &[
    "dog", "cat", "person", "car", "chair", "bottle", "cup", "bicycle", "clock", "umbrella",
];

/// Vocabulary used by [`synth_corpus`]: `Yes`, `No`, `.`, then filler words.
pub fn corpus_vocabulary(vocab_size: u32) -> Vocabulary {
    let mut words = vec!["▁Yes".to_string(), "▁No".to_string(), ".".to_string()];
    words.extend((3..vocab_size).map(|i| format!("▁w{i}")));
    Vocabulary::new(words)
}

pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<SynthCorpus> {
    if spec.vocab_size < 4 {
        return Err(Error::InvalidSpec("corpus vocab needs at least 4 tokens".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut traces = Vec::with_capacity(spec.n_questions);
    let mut questions = Vec::with_capacity(spec.n_questions);
    let splits = [SamplingSplit::Random, SamplingSplit::Popular, SamplingSplit::Adversarial];
    for i in 0..spec.n_questions {
        let gold_yes: bool = master.gen();
        let trace_seed: u64 = master.gen();
        let object = OBJECTS[master.gen_range(0..OBJECTS.len())];
        let (correct, wrong) = if gold_yes {
            (YES_TOKEN, NO_TOKEN)
        } else {
            (NO_TOKEN, YES_TOKEN)
        };
        let qid = format!("synth-{i:05}");
        let trace_spec = SynthSpec {
            question_id: qid.clone(),
            vocab_size: spec.vocab_size,
            layer_ids: spec.layer_ids.clone(),
            standard_layer: spec.standard_layer,
            correct_token: correct,
            wrong_token: wrong,
            closing_token: Some(PERIOD_TOKEN),
            distortion: spec.distortion,
            distortion_jitter: spec.distortion_jitter,
            n_clean_layers: spec.n_clean_layers,
            profile: spec.profile,
            noise_channel: spec.noise_channel,
            storage: spec.storage,
        };
        traces.push(synth_trace(&trace_spec, trace_seed)?);
        questions.push(QuestionMeta {
            question_id: qid,
            prompt_text: format!("Is there a {object} in the image?"),
            gold_label: if gold_yes { GoldLabel::Yes } else { GoldLabel::No },
            gold_text: None,
            dataset_tag: spec.dataset_tag.clone(),
            sampling_split: Some(splits[i % splits.len()]),
        });
    }
    Ok(SynthCorpus {
        traces,
        questions,
        vocab: corpus_vocabulary(spec.vocab_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::{decode_question, DecodeMode, ValidConfig};
    use crate::fusion::preset;

    fn decode(trace: &Trace, mode: DecodeMode) -> u32 {
        let cfg = ValidConfig::new(preset("llava-v1.5").unwrap(), mode);
        decode_question(trace, &cfg).unwrap().emitted_tokens[0]
    }

    #[test]
    fn no_distortion_means_vanilla_is_right() {
        let mut spec = SynthSpec::llava_like("q", 0, 1);
        spec.distortion = 0.0;
        let t = synth_trace(&spec, 1).unwrap();
        assert_eq!(t.standard_distribution(0).unwrap().argmax(), 0);
        assert_eq!(decode(&t, DecodeMode::Vanilla), 0);
        assert_eq!(t.steps[0].chosen_token, 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::llava_like("q", 1, 0);
        let a = synth_trace(&spec, 9).unwrap().to_bytes().unwrap();
        let b = synth_trace(&spec, 9).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let c = synth_trace(&spec, 10).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes() {
        let mut spec = SynthSpec::llava_like("q", 0, 1);
        spec.noise_channel = true;
        let t = synth_trace(&spec, 3).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].per_layer.len(), 25);
        assert!(t.steps.iter().all(|s| s.noise_ref.is_some()));
        assert_eq!(t.steps[1].chosen_token, 2);

        spec.closing_token = None;
        spec.storage = Storage::Probs;
        let t = synth_trace(&spec, 3).unwrap();
        assert_eq!(t.steps.len(), 1);
        // round-trips through the strict reader
        Trace::from_bytes(&t.to_bytes().unwrap()).unwrap();
    }

    #[test]
    fn invalid_specs() {
        let base = SynthSpec::llava_like("q", 0, 1);
        let mut s = base.clone();
        s.correct_token = 64;
        assert!(matches!(synth_trace(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = base.clone();
        s.distortion = 1.5;
        assert!(matches!(synth_trace(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = base.clone();
        s.wrong_token = 0;
        assert!(synth_trace(&s, 0).is_err());
        let mut s = base;
        s.closing_token = Some(1);
        assert!(synth_trace(&s, 0).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_labelled() {
        let spec = CorpusSpec {
            n_questions: 12,
            ..CorpusSpec::default()
        };
        let a = synth_corpus(&spec, 5).unwrap();
        let b = synth_corpus(&spec, 5).unwrap();
        assert_eq!(a.questions, b.questions);
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.vocab.len(), 64);
        for (t, q) in a.traces.iter().zip(&a.questions) {
            assert_eq!(t.question_id(), q.question_id);
        }
        assert!(a.questions.iter().any(|q| q.gold_label == GoldLabel::Yes));
        assert!(a.questions.iter().any(|q| q.gold_label == GoldLabel::No));
    }
}

//! Reader and writer for the `VLIDTRC1` per-question trace format, plus the
//! JSON-lines question sidecar.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "VLIDTRC1"
//! version          u16      currently 1
//! vocab_size       u32
//! layer_count      u16
//! layer_ids        u16 × layer_count   (1-based)
//! standard_layer   u16
//! step_count       u32
//! has_noise        u8       0 or 1
//! storage          u8       0 = logits, 1 = probabilities
//! question_id_len  u32
//! question_id      UTF-8 bytes
//! then step_count × {
//!     rows         f32 × layer_count × vocab_size   (row order = layer_ids)
//!     noise_ref    f32 × vocab_size                  (only if has_noise = 1)
//!     chosen_token u32
//! }
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{normalize, softmax_slice, TokenDistribution};
use crate::error::{Error, Result};
use crate::fusion::{LayerDistributions, LayerId};

pub const MAGIC: &[u8; 8] = b"VLIDTRC1";
pub const FORMAT_VERSION: u16 = 1;

/// Row-sum tolerance for probability storage (32-bit payload).
pub const STORED_PROB_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Storage {
    Logits = 0,
    Probs = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u16,
    pub vocab_size: u32,
    pub layer_ids: Vec<u16>,
    pub standard_layer: u16,
    pub step_count: u32,
    pub has_noise_channel: bool,
    pub storage: Storage,
    pub question_id: String,
}

impl TraceHeader {
    pub fn layer_count(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn row_of(&self, layer: LayerId) -> Option<usize> {
        self.layer_ids.iter().position(|&l| l == layer.0)
    }

    /// Bytes in the fixed-size and question-id portion of the header.
    pub fn encoded_len(&self) -> usize {
        8 + 2 + 4 + 2 + 2 * self.layer_ids.len() + 2 + 4 + 1 + 1 + 4 + self.question_id.len()
    }

    /// Bytes per step record.
    pub fn step_len(&self) -> usize {
        let rows = self.layer_ids.len() + usize::from(self.has_noise_channel);
        rows * self.vocab_size as usize * 4 + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidHeader("vocab_size is 0".into()));
        }
        if self.step_count == 0 {
            return Err(Error::InvalidHeader("step_count is 0".into()));
        }
        if self.layer_ids.is_empty() {
            return Err(Error::InvalidHeader("no layers".into()));
        }
        if self.layer_ids.len() > u16::MAX as usize {
            return Err(Error::InvalidHeader("too many layers".into()));
        }
        if self.layer_ids.contains(&0) {
            return Err(Error::InvalidHeader("layer ids are 1-based".into()));
        }
        let mut sorted = self.layer_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidHeader("duplicate layer id".into()));
        }
        if !self.layer_ids.contains(&self.standard_layer) {
            return Err(Error::InvalidHeader(format!(
                "standard layer {} not among layer ids",
                self.standard_layer
            )));
        }
        if self.question_id.len() > u32::MAX as usize {
            return Err(Error::InvalidHeader("question id too long".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One row per header layer, in header order.
    pub per_layer: Vec<Vec<f32>>,
    pub noise_ref: Option<Vec<f32>>,
    /// Token the recording model emitted at this step.
    pub chosen_token: u32,
}

/// Materializes one stored row as a 64-bit distribution.
pub fn row_distribution(row: &[f32], storage: Storage) -> Result<TokenDistribution> {
    let wide: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
    match storage {
        Storage::Logits => {
            if wide.is_empty() {
                return Err(Error::EmptyVector);
            }
            if let Some(index) = wide.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            Ok(TokenDistribution::from_vec_unchecked(softmax_slice(&wide)))
        }
        Storage::Probs => normalize(&wide),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
}

impl Trace {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        read_trace(&mut file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let mut file = BufWriter::new(File::create(path)?);
        let n = write_trace(&self.header, &self.steps, &mut file)?;
        file.flush()?;
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_trace(&self.header, &self.steps, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }

    pub fn question_id(&self) -> &str {
        &self.header.question_id
    }

    pub fn layer_distribution(&self, step: usize, layer: LayerId) -> Result<TokenDistribution> {
        let row = self.header.row_of(layer).ok_or(Error::MissingLayer(layer.0))?;
        let record = self.step(step)?;
        row_distribution(&record.per_layer[row], self.header.storage)
    }

    pub fn standard_distribution(&self, step: usize) -> Result<TokenDistribution> {
        self.layer_distribution(step, LayerId(self.header.standard_layer))
    }

    /// All layers of a step, keyed by layer id.
    pub fn layer_distributions(&self, step: usize) -> Result<LayerDistributions> {
        let record = self.step(step)?;
        self.header
            .layer_ids
            .iter()
            .zip(&record.per_layer)
            .map(|(&l, row)| Ok((LayerId(l), row_distribution(row, self.header.storage)?)))
            .collect()
    }

    pub fn noise_distribution(&self, step: usize) -> Result<Option<TokenDistribution>> {
        self.step(step)?
            .noise_ref
            .as_deref()
            .map(|row| row_distribution(row, self.header.storage))
            .transpose()
    }

    fn step(&self, step: usize) -> Result<&StepRecord> {
        self.steps.get(step).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "step {step} out of range ({} steps)",
                self.steps.len()
            ))
        })
    }
}

/// Writes header and steps; returns the number of bytes written.
pub fn write_trace<W: Write>(header: &TraceHeader, steps: &[StepRecord], sink: &mut W) -> Result<u64> {
    header.validate()?;
    if steps.len() != header.step_count as usize {
        return Err(Error::ShapeMismatch(format!(
            "header declares {} steps, got {}",
            header.step_count,
            steps.len()
        )));
    }
    let vocab = header.vocab_size as usize;
    for (t, step) in steps.iter().enumerate() {
        if step.per_layer.len() != header.layer_count() {
            return Err(Error::ShapeMismatch(format!(
                "step {t}: {} rows for {} layers",
                step.per_layer.len(),
                header.layer_count()
            )));
        }
        if let Some(r) = step.per_layer.iter().position(|row| row.len() != vocab) {
            return Err(Error::ShapeMismatch(format!(
                "step {t}, row {r}: width {} != vocab {vocab}",
                step.per_layer[r].len()
            )));
        }
        match (&step.noise_ref, header.has_noise_channel) {
            (Some(n), true) if n.len() == vocab => {}
            (None, false) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "step {t}: noise channel does not match header"
                )))
            }
        }
    }

    let mut buf = Vec::with_capacity(header.encoded_len() + steps.len() * header.step_len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&header.vocab_size.to_le_bytes());
    buf.extend_from_slice(&(header.layer_count() as u16).to_le_bytes());
    for l in &header.layer_ids {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    buf.extend_from_slice(&header.standard_layer.to_le_bytes());
    buf.extend_from_slice(&header.step_count.to_le_bytes());
    buf.push(u8::from(header.has_noise_channel));
    buf.push(header.storage as u8);
    buf.extend_from_slice(&(header.question_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.question_id.as_bytes());
    for step in steps {
        for row in step.per_layer.iter().chain(step.noise_ref.as_ref()) {
            for x in row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&step.chosen_token.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

pub fn read_trace<R: Read>(source: &mut R) -> Result<Trace> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::TruncatedFile {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_row(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::TruncatedFile {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse(bytes: &[u8]) -> Result<Trace> {
    let mut cur = Cursor { bytes, pos: 0 };
    // A short prefix that still matches the magic is a truncation, not a bad file.
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        return Err(Error::BadMagic);
    }
    cur.take(MAGIC.len())?;

    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let vocab_size = cur.u32()?;
    let layer_count = cur.u16()?;
    let layer_ids = (0..layer_count).map(|_| cur.u16()).collect::<Result<Vec<_>>>()?;
    let standard_layer = cur.u16()?;
    let step_count = cur.u32()?;
    let has_noise_channel = match cur.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidHeader(format!("has_noise_channel = {other}"))),
    };
    let storage = match cur.u8()? {
        0 => Storage::Logits,
        1 => Storage::Probs,
        other => return Err(Error::InvalidHeader(format!("storage = {other}"))),
    };
    let id_len = cur.u32()? as usize;
    let question_id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|e| Error::InvalidHeader(format!("question id is not UTF-8: {e}")))?
        .to_string();

    let header = TraceHeader {
        version,
        vocab_size,
        layer_ids,
        standard_layer,
        step_count,
        has_noise_channel,
        storage,
        question_id,
    };
    header.validate()?;

    // Reject impossible sizes before allocating.
    let expected = (header.step_len() as u128) * u128::from(step_count);
    let remaining = (bytes.len() - cur.pos) as u128;
    if remaining < expected {
        let whole = (remaining / header.step_len() as u128) as usize;
        let offset = cur.pos + whole * header.step_len();
        return Err(Error::TruncatedFile {
            offset,
            needed: header.step_len(),
        });
    }

    let vocab = vocab_size as usize;
    let mut steps = Vec::with_capacity(step_count as usize);
    for t in 0..step_count as usize {
        let per_layer = (0..header.layer_count())
            .map(|_| cur.f32_row(vocab))
            .collect::<Result<Vec<_>>>()?;
        let noise_ref = if has_noise_channel {
            Some(cur.f32_row(vocab)?)
        } else {
            None
        };
        let chosen_token = cur.u32()?;
        for (r, row) in per_layer.iter().chain(noise_ref.as_ref()).enumerate() {
            check_row(row, storage, t, r)?;
        }
        if chosen_token >= vocab_size {
            return Err(Error::InvalidPayload {
                step: t,
                row: header.layer_count(),
                reason: format!("chosen token {chosen_token} outside vocab"),
            });
        }
        steps.push(StepRecord {
            per_layer,
            noise_ref,
            chosen_token,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(Trace { header, steps })
}

fn check_row(row: &[f32], storage: Storage, step: usize, r: usize) -> Result<()> {
    if let Some(index) = row.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinitePayload { step, row: r, index });
    }
    if storage == Storage::Probs {
        if row.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidPayload {
                step,
                row: r,
                reason: "negative probability".into(),
            });
        }
        let total: f64 = row.iter().map(|&x| f64::from(x)).sum();
        if (total - 1.0).abs() > STORED_PROB_TOLERANCE {
            return Err(Error::InvalidPayload {
                step,
                row: r,
                reason: format!("row sums to {total}"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldLabel {
    Yes,
    No,
    FreeText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingSplit {
    Random,
    Popular,
    Adversarial,
}

impl SamplingSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Popular => "popular",
            Self::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub question_id: String,
    pub prompt_text: String,
    pub gold_label: GoldLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_text: Option<String>,
    pub dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_split: Option<SamplingSplit>,
}

pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<QuestionMeta>> {
    parse_questions(BufReader::new(File::open(path)?))
}

/// One JSON object per non-blank line; unknown keys are ignored.
pub fn parse_questions<R: BufRead>(reader: R) -> Result<Vec<QuestionMeta>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QuestionMeta = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_questions<W: Write>(questions: &[QuestionMeta], sink: &mut W) -> Result<()> {
    for q in questions {
        serde_json::to_writer(&mut *sink, q)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trace(noise: bool) -> Trace {
        let header = TraceHeader {
            version: FORMAT_VERSION,
            vocab_size: 4,
            layer_ids: vec![1, 2],
            standard_layer: 2,
            step_count: 1,
            has_noise_channel: noise,
            storage: Storage::Logits,
            question_id: "q1".into(),
        };
        let steps = vec![StepRecord {
            per_layer: vec![vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]],
            noise_ref: noise.then(|| vec![0.5, 0.0, -0.5, 0.0]),
            chosen_token: 3,
        }];
        Trace { header, steps }
    }

    #[test]
    fn byte_count_matches_layout() {
        let t = small_trace(false);
        let fixed = 2 + 4 + 2 + 2 * 2 + 2 + 4 + 1 + 1 + 4;
        let expected = 8 + fixed + 2 + 2 * 4 * 4 + 4;
        assert_eq!(expected, 70);
        let mut buf = Vec::new();
        let n = write_trace(&t.header, &t.steps, &mut buf).unwrap();
        assert_eq!(n as usize, expected);
        assert_eq!(buf.len(), expected);

        let t = small_trace(true);
        assert_eq!(t.to_bytes().unwrap().len(), expected + 4 * 4);
    }

    #[test]
    fn round_trip() {
        for noise in [false, true] {
            let t = small_trace(noise);
            let bytes = t.to_bytes().unwrap();
            let back = Trace::from_bytes(&bytes).unwrap();
            assert_eq!(back, t);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn step_count_mismatch() {
        let mut t = small_trace(false);
        t.header.step_count = 2;
        assert!(matches!(
            write_trace(&t.header, &t.steps, &mut Vec::new()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn noise_flag_must_match_rows() {
        let mut t = small_trace(false);
        t.header.has_noise_channel = true;
        assert!(matches!(t.to_bytes(), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = small_trace(false).to_bytes().unwrap();
        bytes[3] ^= 0x20;
        assert!(matches!(Trace::from_bytes(&bytes), Err(Error::BadMagic)));
    }

    #[test]
    fn cut_mid_step() {
        let bytes = small_trace(false).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            Trace::from_bytes(cut),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = small_trace(false).to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Trace::from_bytes(&bytes), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn version_and_header_checks() {
        let mut bytes = small_trace(false).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Trace::from_bytes(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));

        let mut t = small_trace(false);
        t.header.standard_layer = 7;
        assert!(matches!(t.to_bytes(), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn non_finite_payload() {
        let mut t = small_trace(false);
        t.steps[0].per_layer[1][2] = f32::NAN;
        let mut buf = Vec::new();
        // the writer does not inspect values
        write_trace(&t.header, &t.steps, &mut buf).unwrap();
        assert!(matches!(
            Trace::from_bytes(&buf),
            Err(Error::NonFinitePayload {
                step: 0,
                row: 1,
                index: 2
            })
        ));
    }

    #[test]
    fn logits_materialize_through_softmax() {
        let t = small_trace(true);
        let d = t.layer_distribution(0, LayerId(1)).unwrap();
        assert_eq!(d.probs(), &[0.25; 4]);
        let std = t.standard_distribution(0).unwrap();
        assert_eq!(std.argmax(), 3);
        assert!(t.noise_distribution(0).unwrap().is_some());
        assert!(matches!(
            t.layer_distribution(0, LayerId(9)),
            Err(Error::MissingLayer(9))
        ));
    }

    #[test]
    fn prob_storage_checks_row_sums() {
        let mut t = small_trace(false);
        t.header.storage = Storage::Probs;
        t.steps[0].per_layer = vec![vec![0.25; 4], vec![0.5, 0.5, 0.0, 0.0]];
        let back = Trace::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(back.layer_distribution(0, LayerId(2)).unwrap().probs(), &[0.5, 0.5, 0.0, 0.0]);

        t.steps[0].per_layer[0] = vec![0.3; 4];
        assert!(matches!(
            Trace::from_bytes(&t.to_bytes().unwrap()),
            Err(Error::InvalidPayload { row: 0, .. })
        ));
    }

    #[test]
    fn questions_parse() {
        let text = concat!(
            r#"{"question_id":"q1","prompt_text":"Is there a dog?","gold_label":"no","dataset_tag":"pope-coco"}"#,
            "\n",
            r#"{"question_id":"q2","prompt_text":"Is there a cat?","gold_label":"yes","dataset_tag":"pope-coco","sampling_split":"popular","extra":1}"#,
            "\n\n",
            r#"{"question_id":"q3","prompt_text":"Describe.","gold_label":"free_text","gold_text":"a cat","dataset_tag":"x"}"#,
            "\n"
        );
        let qs = parse_questions(text.as_bytes()).unwrap();
        assert_eq!(qs.len(), 3);
        assert_eq!(qs[0].question_id, "q1");
        assert_eq!(qs[0].gold_label, GoldLabel::No);
        assert_eq!(qs[1].sampling_split, Some(SamplingSplit::Popular));
        assert_eq!(qs[2].gold_text.as_deref(), Some("a cat"));

        let mut out = Vec::new();
        write_questions(&qs, &mut out).unwrap();
        assert_eq!(parse_questions(out.as_slice()).unwrap(), qs);
    }

    #[test]
    fn questions_missing_field() {
        let text = concat!(
            r#"{"question_id":"q1","prompt_text":"a","gold_label":"no","dataset_tag":"t"}"#,
            "\n",
            r#"{"question_id":"q2","prompt_text":"b","dataset_tag":"t"}"#,
            "\n"
        );
        assert!(matches!(
            parse_questions(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}

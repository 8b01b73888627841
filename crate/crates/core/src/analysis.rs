//! Layer-wise probing diagnostics: encoding distortion rate per bucket and the
//! per-layer mean-entropy / accuracy curve, with CSV and SVG emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::answer::{classify_token, first_content_position, Answer, Vocabulary};
use crate::dist::entropy;
use crate::error::{Error, Result};
use crate::fusion::{parse_layer_list, LayerId};
use crate::trace::{GoldLabel, Trace};

/// Whether each layer, decoded on its own, answers one question correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrectness {
    pub question_id: String,
    pub per_layer: BTreeMap<LayerId, bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerObservation {
    pub layer: LayerId,
    pub entropy: f64,
    pub correct: bool,
}

/// A named set of layers for distortion-rate reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketDef {
    pub name: String,
    pub layers: Vec<LayerId>,
}

/// Parses `1-4,5-8/9,10` style definitions: buckets separated by `/`, each a
/// layer list. Buckets are named `bucket1`, `bucket2`, ...
pub fn parse_bucket_defs(text: &str) -> Result<Vec<BucketDef>> {
    text.split('/')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, part)| {
            Ok(BucketDef {
                name: format!("bucket{}", i + 1),
                layers: parse_layer_list(part)?,
            })
        })
        .collect()
}

/// Splits `layers` into consecutive chunks of `size`.
pub fn even_buckets(layers: &[LayerId], size: usize) -> Vec<BucketDef> {
    layers
        .chunks(size.max(1))
        .enumerate()
        .map(|(i, c)| BucketDef {
            name: format!("bucket{}", i + 1),
            layers: c.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdrRow {
    pub bucket: String,
    pub layers: Vec<LayerId>,
    pub numerator: usize,
    pub denominator: usize,
    pub edr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdrReport {
    pub standard_layer: LayerId,
    pub rows: Vec<EdrRow>,
}

/// Fraction of standard-layer-wrong questions that some layer of each bucket
/// answers correctly.
pub fn compute_edr(
    table: &[LayerCorrectness],
    buckets: &[BucketDef],
    standard_layer: LayerId,
) -> Result<EdrReport> {
    if buckets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut denominator = 0;
    let mut numerators = vec![0usize; buckets.len()];
    for q in table {
        let lookup = |l: &LayerId| {
            q.per_layer.get(l).copied().ok_or_else(|| {
                Error::ShapeMismatch(format!("question {} lacks layer {l}", q.question_id))
            })
        };
        if lookup(&standard_layer)? {
            continue;
        }
        denominator += 1;
        for (b, n) in buckets.iter().zip(numerators.iter_mut()) {
            let mut any = false;
            for l in &b.layers {
                any |= lookup(l)?;
            }
            *n += usize::from(any);
        }
    }
    if denominator == 0 {
        return Err(Error::EmptyDenominator);
    }
    Ok(EdrReport {
        standard_layer,
        rows: buckets
            .iter()
            .zip(numerators)
            .map(|(b, n)| EdrRow {
                bucket: b.name.clone(),
                layers: b.layers.clone(),
                numerator: n,
                denominator,
                edr: n as f64 / denominator as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: LayerId,
    pub mean_entropy: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub points: Vec<CurvePoint>,
}

/// Single-pass accumulator; partial accumulators merge exactly on counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveAccumulator {
    per_layer: BTreeMap<LayerId, (f64, usize, usize)>,
}

impl CurveAccumulator {
    pub fn push(&mut self, obs: &LayerObservation) {
        let e = self.per_layer.entry(obs.layer).or_insert((0.0, 0, 0));
        e.0 += obs.entropy;
        e.1 += usize::from(obs.correct);
        e.2 += 1;
    }

    pub fn merge(&mut self, other: &CurveAccumulator) {
        for (l, (h, c, n)) in &other.per_layer {
            let e = self.per_layer.entry(*l).or_insert((0.0, 0, 0));
            e.0 += h;
            e.1 += c;
            e.2 += n;
        }
    }

    pub fn finish(&self) -> LayerCurve {
        LayerCurve {
            points: self
                .per_layer
                .iter()
                .map(|(l, (h, c, n))| CurvePoint {
                    layer: *l,
                    mean_entropy: h / *n as f64,
                    accuracy: *c as f64 / *n as f64,
                    n: *n,
                })
                .collect(),
        }
    }
}

pub fn layer_curves(records: &[LayerObservation]) -> LayerCurve {
    let mut acc = CurveAccumulator::default();
    for r in records {
        acc.push(r);
    }
    acc.finish()
}

/// Decodes each layer of `trace` on its own at the answer step and scores it
/// against `gold`.
///
/// The answer step is the first step whose recorded token carries content;
/// step 0 if none does.
pub fn probe_trace(
    trace: &Trace,
    gold: GoldLabel,
    vocab: &Vocabulary,
) -> Result<(LayerCorrectness, Vec<LayerObservation>)> {
    let want = match gold {
        GoldLabel::Yes => Answer::Yes,
        GoldLabel::No => Answer::No,
        GoldLabel::FreeText => {
            return Err(Error::InvalidConfig(format!(
                "question {} is free-text; probing needs yes/no",
                trace.question_id()
            )))
        }
    };
    let recorded: Vec<u32> = trace.steps.iter().map(|s| s.chosen_token).collect();
    let step = first_content_position(&recorded, vocab)?.unwrap_or(0);
    let per_layer = trace.layer_distributions(step)?;
    let mut correctness = BTreeMap::new();
    let mut obs = Vec::with_capacity(per_layer.len());
    for (layer, dist) in &per_layer {
        let token = dist.argmax() as u32;
        let correct = classify_token(vocab.text(token)?) == Some(want);
        correctness.insert(*layer, correct);
        obs.push(LayerObservation {
            layer: *layer,
            entropy: entropy(dist).value(),
            correct,
        });
    }
    Ok((
        LayerCorrectness {
            question_id: trace.question_id().to_string(),
            per_layer: correctness,
        },
        obs,
    ))
}

pub fn curve_csv(curve: &LayerCurve) -> Result<String> {
    if curve.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = String::from("layer,mean_entropy,accuracy,n\n");
    for p in &curve.points {
        writeln!(out, "{},{:.12},{:.12},{}", p.layer, p.mean_entropy, p.accuracy, p.n).unwrap();
    }
    Ok(out)
}

pub fn edr_csv(report: &EdrReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = String::from("bucket,layers,numerator,denominator,edr,edr_percent\n");
    for r in &report.rows {
        let layers: Vec<String> = r.layers.iter().map(|l| l.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{:.12},{}",
            r.bucket,
            layers.join(" "),
            r.numerator,
            r.denominator,
            r.edr,
            percent(r.edr)
        )
        .unwrap();
    }
    Ok(out)
}

/// Two decimals, as a percentage: `0.693548 -> "69.35"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn csv_rows(csv: &str) -> Vec<Vec<&str>> {
    csv.lines().skip(1).map(|l| l.split(',').collect()).collect()
}

fn parse_field(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Parse {
            line: 0,
            message: format!("bad number {s:?} in CSV"),
        })
}

/// Two-series line chart (mean entropy on the left axis, accuracy on the
/// right) rendered from [`curve_csv`] output.
pub fn curve_svg(csv: &str) -> Result<String> {
    let rows = csv_rows(csv);
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut pts = Vec::with_capacity(rows.len());
    for r in &rows {
        pts.push((parse_field(r[0])?, parse_field(r[1])?, parse_field(r[2])?));
    }
    let h_max = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9);
    let n = pts.len();
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let x = |i: usize| {
        if n == 1 {
            MARGIN + plot_w / 2.0
        } else {
            MARGIN + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let y = |v: f64| SVG_H - MARGIN - plot_h * v;

    let mut s = svg_open();
    axes(&mut s);
    let mut ent = String::new();
    let mut acc = String::new();
    for (i, (_, h, a)) in pts.iter().enumerate() {
        write!(ent, "{:.2},{:.2} ", x(i), y(h / h_max)).unwrap();
        write!(acc, "{:.2},{:.2} ", x(i), y(*a)).unwrap();
    }
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        ent.trim_end()
    )
    .unwrap();
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="2" points="{}"/>"##,
        acc.trim_end()
    )
    .unwrap();
    for (i, (layer, h, a)) in pts.iter().enumerate() {
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/><circle cx="{:.2}" cy="{:.2}" r="3" fill="#d62728"/>"##,
            x(i),
            y(h / h_max),
            x(i),
            y(*a)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x(i),
            SVG_H - MARGIN + 14.0,
            *layer as u64
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{MARGIN}" y="20" font-size="12">mean entropy (blue, max {h_max:.3} nats) / accuracy (red)</text>"#
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bar chart of per-bucket distortion rate rendered from [`edr_csv`] output.
pub fn edr_svg(csv: &str) -> Result<String> {
    let rows = csv_rows(csv);
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let slot = plot_w / rows.len() as f64;
    let mut s = svg_open();
    axes(&mut s);
    for (i, r) in rows.iter().enumerate() {
        let edr = parse_field(r[4])?;
        let h = plot_h * edr;
        let x0 = MARGIN + slot * i as f64 + slot * 0.15;
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#2ca02c"/>"##,
            x0,
            SVG_H - MARGIN - h,
            slot * 0.7,
            h
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.35,
            SVG_H - MARGIN - h - 4.0,
            r[5]
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.35,
            SVG_H - MARGIN + 14.0,
            r[0]
        )
        .unwrap();
    }
    writeln!(s, r#"<text x="{MARGIN}" y="20" font-size="12">encoding distortion rate (%)</text>"#)
        .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn axes(s: &mut String) {
    writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN
    )
    .unwrap();
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`. Nothing is written if the
/// input is empty.
fn emit(dir: &Path, stem: &str, csv: String, svg: String) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&csv_path, csv)?;
    fs::write(&svg_path, svg)?;
    Ok(vec![csv_path, svg_path])
}

pub fn emit_curve(curve: &LayerCurve, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = curve_csv(curve)?;
    let svg = curve_svg(&csv)?;
    emit(dir, "curves", csv, svg)
}

pub fn emit_edr(report: &EdrReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let csv = edr_csv(report)?;
    let svg = edr_svg(&csv)?;
    emit(dir, "edr", csv, svg)
}

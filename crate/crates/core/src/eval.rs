//! Binary yes/no metrics over decode outcomes: accuracy, precision, recall,
//! F1 and yes-ratio per (mode, split), plus baseline deltas and table emitters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::answer::{first_content_answer, Answer, Vocabulary};
use crate::decode::DecodeOutcome;
use crate::error::{Error, Result};
use crate::trace::{GoldLabel, QuestionMeta};

/// Split tag used for records without one and for per-mode rollups.
pub const ALL_SPLITS: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub gold: Gold,
    pub predicted: Answer,
    pub mode: String,
    pub split: String,
}

impl EvalRecord {
    /// Pairs a decode outcome with its question. Free-text questions have no
    /// binary gold label and are rejected.
    pub fn from_outcome(
        outcome: &DecodeOutcome,
        meta: &QuestionMeta,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if outcome.question_id != meta.question_id {
            return Err(Error::ShapeMismatch(format!(
                "outcome {} paired with question {}",
                outcome.question_id, meta.question_id
            )));
        }
        let gold = match meta.gold_label {
            GoldLabel::Yes => Gold::Yes,
            GoldLabel::No => Gold::No,
            GoldLabel::FreeText => {
                return Err(Error::InvalidConfig(format!(
                    "question {} has a free-text gold label",
                    meta.question_id
                )))
            }
        };
        Ok(Self {
            question_id: outcome.question_id.clone(),
            gold,
            predicted: first_content_answer(&outcome.emitted_tokens, vocab)?,
            mode: outcome.mode.as_str().to_string(),
            split: meta
                .sampling_split
                .map_or_else(|| ALL_SPLITS.to_string(), |s| s.as_str().to_string()),
        })
    }
}

/// What to do with predictions that map to neither label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    /// Kept in `n`, never counted as "yes", always wrong.
    #[default]
    Incorrect,
    /// Removed from every metric; still reported in the counts.
    Drop,
    /// Treated as a "no" prediction.
    CoerceNo,
}

impl UnparseablePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Incorrect => "incorrect",
            Self::Drop => "drop",
            Self::CoerceNo => "coerce_no",
        }
    }
}

impl FromStr for UnparseablePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incorrect" => Ok(Self::Incorrect),
            "drop" => Ok(Self::Drop),
            "coerce_no" | "coerce-no" => Ok(Self::CoerceNo),
            _ => Err(Error::InvalidConfig(format!("unknown unparseable policy {s:?}"))),
        }
    }
}

/// Integer confusion counts with "yes" as the positive class. Unparseable
/// predictions are tallied by gold label so every policy can be applied
/// after aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub unparseable_yes: u64,
    pub unparseable_no: u64,
}

impl ConfusionCounts {
    pub fn push(&mut self, gold: Gold, predicted: Answer) {
        match (gold, predicted) {
            (Gold::Yes, Answer::Yes) => self.tp += 1,
            (Gold::No, Answer::Yes) => self.fp += 1,
            (Gold::No, Answer::No) => self.tn += 1,
            (Gold::Yes, Answer::No) => self.fn_ += 1,
            (Gold::Yes, Answer::Unparseable) => self.unparseable_yes += 1,
            (Gold::No, Answer::Unparseable) => self.unparseable_no += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
        self.unparseable_yes += other.unparseable_yes;
        self.unparseable_no += other.unparseable_no;
    }

    pub fn unparseable(&self) -> u64 {
        self.unparseable_yes + self.unparseable_no
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.unparseable()
    }

    pub fn metrics(&self, policy: UnparseablePolicy) -> Metrics {
        let (tp, fp) = (self.tp, self.fp);
        // every policy leaves tp/fp alone; they differ in where unparseable
        // predictions land among the negatives
        let (tn, fn_, n) = match policy {
            UnparseablePolicy::Incorrect => (
                self.tn,
                self.fn_ + self.unparseable_yes,
                self.total(),
            ),
            UnparseablePolicy::Drop => (self.tn, self.fn_, self.total() - self.unparseable()),
            UnparseablePolicy::CoerceNo => (
                self.tn + self.unparseable_no,
                self.fn_ + self.unparseable_yes,
                self.total(),
            ),
        };
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            n,
            accuracy: ratio(tp + tn, n),
            precision,
            recall,
            f1,
            yes_ratio: ratio(tp + fp, n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "recall", "f1", "yes_ratio"];

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.yes_ratio]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: String,
    pub split: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

/// Rows sorted by (mode, split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub policy: UnparseablePolicy,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    fn from_counts(
        policy: UnparseablePolicy,
        counts: BTreeMap<(String, String), ConfusionCounts>,
    ) -> Self {
        Self {
            policy,
            rows: counts
                .into_iter()
                .map(|((mode, split), c)| MetricsRow {
                    mode,
                    split,
                    metrics: c.metrics(policy),
                    counts: c,
                })
                .collect(),
        }
    }

    pub fn get(&self, mode: &str, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.mode == mode && r.split == split)
    }

    pub fn modes(&self) -> Vec<&str> {
        let mut m: Vec<&str> = self.rows.iter().map(|r| r.mode.as_str()).collect();
        m.dedup();
        m
    }
}

/// Shard-level aggregation state; merging shards reproduces the
/// whole-corpus table exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreAccumulator {
    counts: BTreeMap<(String, String), ConfusionCounts>,
}

impl ScoreAccumulator {
    pub fn push(&mut self, r: &EvalRecord) {
        self.counts
            .entry((r.mode.clone(), r.split.clone()))
            .or_default()
            .push(r.gold, r.predicted);
    }

    pub fn merge(&mut self, other: &ScoreAccumulator) {
        for (k, c) in &other.counts {
            self.counts.entry(k.clone()).or_default().merge(c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Per-(mode, split) rows, plus an `all` rollup for every mode that has
    /// more than one split.
    pub fn finish(&self, policy: UnparseablePolicy) -> Result<MetricsTable> {
        if self.counts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut counts = self.counts.clone();
        let mut rollup: BTreeMap<String, (usize, ConfusionCounts)> = BTreeMap::new();
        for ((mode, split), c) in &self.counts {
            if split != ALL_SPLITS {
                let e = rollup.entry(mode.clone()).or_default();
                e.0 += 1;
                e.1.merge(c);
            }
        }
        for (mode, (splits, c)) in rollup {
            let has_all = self.counts.contains_key(&(mode.clone(), ALL_SPLITS.to_string()));
            if splits > 1 && !has_all {
                counts.insert((mode, ALL_SPLITS.to_string()), c);
            }
        }
        Ok(MetricsTable::from_counts(policy, counts))
    }
}

pub fn score(records: &[EvalRecord], policy: UnparseablePolicy) -> Result<MetricsTable> {
    let mut acc = ScoreAccumulator::default();
    for r in records {
        acc.push(r);
    }
    acc.finish(policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub mode: String,
    pub split: String,
    /// `mode - baseline` for each of [`Metrics::NAMES`].
    pub deltas: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline: String,
    pub rows: Vec<DeltaRow>,
}

/// Per-split, per-metric deltas of every non-baseline mode against
/// `baseline`. Every split a mode reports must exist for the baseline.
pub fn compare(table: &MetricsTable, baseline: &str) -> Result<DeltaReport> {
    if !table.rows.iter().any(|r| r.mode == baseline) {
        return Err(Error::MissingBaseline(baseline.to_string()));
    }
    let mut rows = Vec::new();
    for r in table.rows.iter().filter(|r| r.mode != baseline) {
        let base = table.get(baseline, &r.split).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "baseline {baseline} has no split {} (needed by {})",
                r.split, r.mode
            ))
        })?;
        let (a, b) = (r.metrics.values(), base.metrics.values());
        rows.push(DeltaRow {
            mode: r.mode.clone(),
            split: r.split.clone(),
            deltas: std::array::from_fn(|i| a[i] - b[i]),
        });
    }
    Ok(DeltaReport {
        baseline: baseline.to_string(),
        rows,
    })
}

/// Merges tables scored separately (one per mode, say) into one. Rows for
/// the same (mode, split) must not appear twice.
pub fn merge_tables(tables: &[MetricsTable]) -> Result<MetricsTable> {
    let policy = tables.first().ok_or(Error::EmptyInput)?.policy;
    let mut counts = BTreeMap::new();
    for t in tables {
        if t.policy != policy {
            return Err(Error::InvalidConfig(
                "tables scored under different unparseable policies".into(),
            ));
        }
        for r in &t.rows {
            if counts
                .insert((r.mode.clone(), r.split.clone()), r.counts)
                .is_some()
            {
                return Err(Error::InvalidConfig(format!(
                    "duplicate row for mode {} split {}",
                    r.mode, r.split
                )));
            }
        }
    }
    Ok(MetricsTable::from_counts(policy, counts))
}

/// Two-decimal percentage, as metric tables usually print.
fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn signed_pct(x: f64) -> String {
    let v = x * 100.0;
    // avoid "-0.00"
    if v.abs() < 0.005 {
        "+0.00".into()
    } else {
        format!("{v:+.2}")
    }
}

pub fn metrics_markdown(table: &MetricsTable) -> String {
    let mut out = String::from(
        "| Split | Method | n | Accuracy | Precision | Recall | F1 | Yes ratio | Unparseable |\n\
         |---|---|---:|---:|---:|---:|---:|---:|---:|\n",
    );
    let mut rows: Vec<&MetricsRow> = table.rows.iter().collect();
    rows.sort_by(|a, b| (&a.split, &a.mode).cmp(&(&b.split, &b.mode)));
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.split,
            r.mode,
            m.n,
            pct(m.accuracy),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            pct(m.yes_ratio),
            r.counts.unparseable()
        )
        .unwrap();
    }
    writeln!(out, "\nUnparseable policy: {}", table.policy.as_str()).unwrap();
    out
}

const METRICS_CSV_HEADER: &str = "mode,split,policy,tp,fp,tn,fn,unparseable_yes,unparseable_no,n,accuracy,precision,recall,f1,yes_ratio";

pub fn metrics_csv(table: &MetricsTable) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in &table.rows {
        let (c, m) = (&r.counts, &r.metrics);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.12},{:.12},{:.12},{:.12},{:.12}",
            r.mode,
            r.split,
            table.policy.as_str(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            c.unparseable_yes,
            c.unparseable_no,
            m.n,
            m.accuracy,
            m.precision,
            m.recall,
            m.f1,
            m.yes_ratio
        )
        .unwrap();
    }
    out
}

/// Reads [`metrics_csv`] output back. Metrics are recomputed from the
/// integer counts, so the round trip is exact.
pub fn parse_metrics_csv(text: &str) -> Result<MetricsTable> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing metrics CSV header".into(),
            })
        }
    }
    let mut policy = None;
    let mut counts = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(bad(format!("expected 15 fields, found {}", f.len())));
        }
        let p: UnparseablePolicy = f[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        if *policy.get_or_insert(p) != p {
            return Err(bad("mixed unparseable policies".into()));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad count {s:?}")));
        let c = ConfusionCounts {
            tp: num(f[3])?,
            fp: num(f[4])?,
            tn: num(f[5])?,
            fn_: num(f[6])?,
            unparseable_yes: num(f[7])?,
            unparseable_no: num(f[8])?,
        };
        if counts
            .insert((f[0].to_string(), f[1].to_string()), c)
            .is_some()
        {
            return Err(bad(format!("duplicate row {} {}", f[0], f[1])));
        }
    }
    let policy = policy.ok_or(Error::EmptyInput)?;
    Ok(MetricsTable::from_counts(policy, counts))
}

pub fn delta_markdown(report: &DeltaReport) -> String {
    let mut out = String::from(
        "| Split | Method | Δ Accuracy | Δ Precision | Δ Recall | Δ F1 | Δ Yes ratio |\n\
         |---|---|---:|---:|---:|---:|---:|\n"
    );
    let mut rows: Vec<&DeltaRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| (&a.split, &a.mode).cmp(&(&b.split, &b.mode)));
    for r in rows {
        let d: Vec<String> = r.deltas.iter().map(|&x| signed_pct(x)).collect();
        writeln!(out, "| {} | {} | {} |", r.split, r.mode, d.join(" | ")).unwrap();
    }
    writeln!(out, "\nBaseline: {}", report.baseline).unwrap();
    out
}

pub fn delta_csv(report: &DeltaReport) -> String {
    let mut out = String::from("baseline,mode,split");
    for n in Metrics::NAMES {
        write!(out, ",delta_{n}").unwrap();
    }
    out.push('\n');
    for r in &report.rows {
        write!(out, "{},{},{}", report.baseline, r.mode, r.split).unwrap();
        for d in r.deltas {
            write!(out, ",{d:.12}").unwrap();
        }
        out.push('\n');
    }
    out
}

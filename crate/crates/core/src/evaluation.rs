//! Scoring, metrics and report rendering.
//!
//! Sarcastic is the positive class. Percentages stay in full precision and
//! are rounded to one decimal only when rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Split;
use crate::dispatch::CallCounts;
use crate::evidence::{Prediction, PredictionRecord};
use crate::registry::SubTaskKind;
use crate::sample::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold label for: {}", .0.join(", "))]
    MissingGold(Vec<String>),
    #[error("run `{run}` has no prediction for `{id}`")]
    MissingPrediction { run: String, id: String },
    #[error("line {line}: malformed prediction record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: Label, gold: Label) {
        match (predicted, gold) {
            (Label::Sarcastic, Label::Sarcastic) => self.tp += 1,
            (Label::Sarcastic, Label::NonSarcastic) => self.fp += 1,
            (Label::NonSarcastic, Label::Sarcastic) => self.fn_ += 1,
            (Label::NonSarcastic, Label::NonSarcastic) => self.tn += 1,
        }
    }
}

/// Tallies predictions against gold labels. Every prediction must have a gold.
pub fn score<'a>(
    predictions: impl IntoIterator<Item = &'a Prediction>,
    golds: &BTreeMap<String, Label>,
) -> Result<ConfusionCounts, EvalError> {
    let mut counts = ConfusionCounts::default();
    let mut missing = BTreeSet::new();
    for p in predictions {
        match golds.get(&p.sample_id) {
            Some(&gold) => counts.record(p.label, gold),
            None => {
                missing.insert(p.sample_id.clone());
            }
        }
    }
    if missing.is_empty() {
        Ok(counts)
    } else {
        Err(EvalError::MissingGold(missing.into_iter().collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics(c: &ConfusionCounts) -> MetricsReport {
    let precision = pct(c.tp, c.tp + c.fp);
    let recall = pct(c.tp, c.tp + c.fn_);
    MetricsReport {
        f1: f1_from(precision, recall),
        acc: pct(c.tp + c.tn, c.total()),
        precision,
        recall,
    }
}

/// One decimal, halves rounded away from zero.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn fmt1(x: f64) -> String {
    format!("{:.1}", round1(x))
}

/// A set of disabled kinds; empty means the full system.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct AblationConfig {
    pub disabled: BTreeSet<SubTaskKind>,
}

impl AblationConfig {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn without(kind: SubTaskKind) -> Self {
        AblationConfig {
            disabled: [kind].into_iter().collect(),
        }
    }

    pub fn label(&self) -> String {
        if self.disabled.is_empty() {
            return "Ours".to_string();
        }
        let names: Vec<&str> = self.disabled.iter().map(|k| k.display_name()).collect();
        format!("w/o {}", names.join(", "))
    }

    /// Directory-safe name: `ours` or `wo-<slug>[-<slug>..]`.
    pub fn slug(&self) -> String {
        if self.disabled.is_empty() {
            return "ours".to_string();
        }
        let slugs: Vec<&str> = self.disabled.iter().map(|k| k.slug()).collect();
        format!("wo-{}", slugs.join("-"))
    }

    /// The seven standard rows, in table order.
    pub fn standard_suite() -> Vec<AblationConfig> {
        use SubTaskKind::*;
        std::iter::once(Self::full())
            .chain([Rhetoric, Keyword, Sentiment, ImgSum, TexExt, FacExp].map(Self::without))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub group: String,
    pub name: String,
    pub metrics: MetricsReport,
}

impl ResultRow {
    pub fn new(group: impl Into<String>, name: impl Into<String>, metrics: MetricsReport) -> Self {
        ResultRow {
            group: group.into(),
            name: name.into(),
            metrics,
        }
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut out = String::from("|");
        for (cell, w) in cells.zip(&widths) {
            let pad = w - cell.chars().count();
            let _ = write!(out, " {cell}{} |", " ".repeat(pad));
        }
        out.push('\n');
        out
    };
    let mut out = line(&mut header.iter().copied());
    out.push('|');
    for w in &widths {
        out.push_str(&"-".repeat(w + 2));
        out.push('|');
    }
    out.push('\n');
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

/// Metrics table; the best f1 within each group carries a trailing `*`.
pub fn render_results_table(rows: &[ResultRow]) -> String {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in rows {
        let b = best.entry(&r.group).or_insert(f64::NEG_INFINITY);
        *b = b.max(r.metrics.f1);
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let star = if best[r.group.as_str()] == r.metrics.f1 {
                "*"
            } else {
                ""
            };
            vec![
                r.group.clone(),
                r.name.clone(),
                format!("{}{star}", fmt1(r.metrics.f1)),
                fmt1(r.metrics.acc),
                fmt1(r.metrics.precision),
                fmt1(r.metrics.recall),
            ]
        })
        .collect();
    render_table(&["group", "method", "f1", "acc", "pre", "rec"], &cells)
}

/// Per-sample correctness grid: one ✓/✗ column per named run.
pub fn render_case_table(
    runs: &[(String, Vec<Prediction>)],
    golds: &BTreeMap<String, Label>,
    ids: &[String],
) -> Result<String, EvalError> {
    let lookup: Vec<BTreeMap<&str, Label>> = runs
        .iter()
        .map(|(_, preds)| preds.iter().map(|p| (p.sample_id.as_str(), p.label)).collect())
        .collect();
    let missing: Vec<String> = ids.iter().filter(|id| !golds.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingGold(missing));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let gold = golds[id];
        let mut row = vec![id.clone(), gold.to_string()];
        for ((name, _), preds) in runs.iter().zip(&lookup) {
            let predicted = preds.get(id.as_str()).ok_or_else(|| EvalError::MissingPrediction {
                run: name.clone(),
                id: id.clone(),
            })?;
            row.push(if *predicted == gold { "✓" } else { "✗" }.to_string());
        }
        rows.push(row);
    }
    let mut header = vec!["id", "gold"];
    header.extend(runs.iter().map(|(n, _)| n.as_str()));
    Ok(render_table(&header, &rows))
}

/// Reads prediction records, one JSON object per line.
pub fn import_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| EvalError::MalformedRecord {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(record.into());
    }
    Ok(out)
}

pub fn write_predictions<'a>(
    path: &Path,
    predictions: impl IntoIterator<Item = &'a PredictionRecord>,
) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for record in predictions {
        serde_json::to_writer(&mut out, record).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// A sample that produced no prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    /// `routing` or `classification`.
    pub stage: String,
    /// `backend_exhausted`, `image_unavailable` or `invalid_input`.
    pub cause: String,
    pub reason: String,
}

/// Outcome of one run. Everything serialized here is a function of the
/// dataset, the configuration and the backend replies; timing lives in
/// `wall_clock_ms` and is not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub label: String,
    pub dataset: String,
    pub split: Split,
    pub n_samples: usize,
    pub n_scored: usize,
    pub predictions_file: String,
    pub confusion: ConfusionCounts,
    pub metrics: MetricsReport,
    pub call_counts: CallCounts,
    pub fallback_routings: usize,
    pub defaulted_parses: usize,
    pub failures: Vec<SampleFailure>,
    #[serde(skip)]
    pub wall_clock_ms: u64,
    #[serde(skip)]
    pub predictions: Vec<PredictionRecord>,
}

impl ExperimentReport {
    /// Metrics agree with the counts and the counts cover every scored sample.
    pub fn is_consistent(&self) -> bool {
        self.metrics == metrics(&self.confusion) && self.confusion.total() as usize == self.n_scored
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn render_markdown(&self) -> String {
        let mut out = format!("# {} ({} / {})\n\n", self.label, self.dataset, self.split);
        let _ = writeln!(out, "config digest: `{}`\n", self.config_digest);
        out.push_str(&render_results_table(&[ResultRow::new(
            self.dataset.clone(),
            self.label.clone(),
            self.metrics,
        )]));
        let c = &self.confusion;
        let _ = writeln!(
            out,
            "\nscored {} of {} samples: tp={} fp={} fn={} tn={}",
            self.n_scored, self.n_samples, c.tp, c.fp, c.fn_, c.tn
        );
        let _ = writeln!(
            out,
            "fallback routings: {}, defaulted parses: {}\n",
            self.fallback_routings, self.defaulted_parses
        );
        let calls: Vec<Vec<String>> = self
            .call_counts
            .iter()
            .map(|(k, n)| vec![k.display_name().to_string(), n.to_string()])
            .collect();
        out.push_str(&render_table(&["sub-task", "calls"], &calls));
        if !self.failures.is_empty() {
            out.push_str("\nfailures:\n");
            for f in &self.failures {
                let _ = writeln!(out, "- {} ({}): {}", f.sample_id, f.stage, f.reason);
            }
        }
        out
    }
}

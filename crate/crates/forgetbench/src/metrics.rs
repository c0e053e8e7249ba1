//! Aggregation of evaluation records into accuracy matrices, verdict
//! histograms, forgetting gaps, and top-k predicted-label tables, plus the
//! deterministic report emitters.
//!
//! Percentages are rendered with two decimals, rounded half-up, and the
//! underlying arithmetic is integer (hundredths of a percentage point) so
//! gap totals are exact.

use crate::postproc::Verdict;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records")]
    EmptyRecords,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dataset columns differ: {left:?} vs {right:?}")]
    ColumnMismatch {
        left: Vec<String>,
        right: Vec<String>,
    },
    #[error("row {0:?} not found in report")]
    UnknownRow(String),
    #[error("record line {line}: {source}")]
    ParseRecord {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One evaluated query: the append-only unit of evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Unique within a run; stable across resumes (dataset name + item index).
    pub id: String,
    pub dataset: String,
    pub model: String,
    /// Ground-truth label in canonical form.
    pub truth: String,
    pub prompt_digest: String,
    /// Raw model output, untrimmed.
    pub output: String,
    /// Grading strategy: "rule", "embed", or "judge".
    pub strategy: String,
    pub verdict: Verdict,
    /// Canonical labels matched in the output, in offset order.
    pub matched: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_distance: Option<f64>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

fn default_schema_version() -> u32 {
    1
}

/// Fraction of records graded `Correct`.
pub fn accuracy(records: &[RunRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let correct = records
        .iter()
        .filter(|r| r.verdict == Verdict::Correct)
        .count();
    Ok(correct as f64 / records.len() as f64)
}

/// Percentage in integer hundredths, rounded half-up: `round(100 * n / d)`
/// at two decimals. Exact integer arithmetic.
pub fn percent_hundredths(numerator: u64, denominator: u64) -> i64 {
    assert!(denominator > 0, "percentage of an empty set");
    let n = numerator as u128;
    let d = denominator as u128;
    ((2 * n * 10_000 + d) / (2 * d)) as i64
}

/// Render hundredths as "NN.NN" (no percent sign).
pub fn format_hundredths(hundredths: i64) -> String {
    let sign = if hundredths < 0 { "-" } else { "" };
    let abs = hundredths.unsigned_abs();
    format!("{sign}{}.{:02}", abs / 100, abs % 100)
}

/// Render a count/total ratio as "NN.NN%".
pub fn format_percent(numerator: u64, denominator: u64) -> String {
    format!(
        "{}%",
        format_hundredths(percent_hundredths(numerator, denominator))
    )
}

/// Per-cell statistics of an accuracy matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStats {
    pub correct: u64,
    pub count: u64,
    pub histogram: BTreeMap<Verdict, u64>,
}

impl CellStats {
    pub fn accuracy_hundredths(&self) -> i64 {
        percent_hundredths(self.correct, self.count)
    }
}

/// Accuracy matrix: rows are model/checkpoint names, columns dataset names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub datasets: Vec<String>,
    /// Sorted by model name; a missing cell means the model was never run
    /// on that dataset.
    pub rows: Vec<(String, Vec<Option<CellStats>>)>,
}

/// Group records into an accuracy matrix. Datasets and models are sorted
/// for deterministic output.
pub fn build_report(records: &[RunRecord]) -> Result<AccuracyReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut datasets: Vec<String> = records.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut cells: BTreeMap<String, BTreeMap<String, CellStats>> = BTreeMap::new();
    for r in records {
        let cell = cells
            .entry(r.model.clone())
            .or_default()
            .entry(r.dataset.clone())
            .or_insert_with(|| CellStats {
                correct: 0,
                count: 0,
                histogram: BTreeMap::new(),
            });
        cell.count += 1;
        if r.verdict == Verdict::Correct {
            cell.correct += 1;
        }
        *cell.histogram.entry(r.verdict).or_insert(0) += 1;
    }
    let rows = cells
        .into_iter()
        .map(|(model, mut by_dataset)| {
            let row = datasets
                .iter()
                .map(|d| by_dataset.remove(d))
                .collect::<Vec<_>>();
            (model, row)
        })
        .collect();
    Ok(AccuracyReport { datasets, rows })
}

impl AccuracyReport {
    pub fn row(&self, model: &str) -> Option<&[Option<CellStats>]> {
        self.rows
            .iter()
            .find(|(name, _)| name == model)
            .map(|(_, cells)| cells.as_slice())
    }

    /// CSV with header `checkpoint,<dataset...>` and cells formatted
    /// "NN.NN%". Missing cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["checkpoint".to_string()];
        header.extend(self.datasets.iter().cloned());
        w.write_record(&header).expect("csv header");
        for (model, cells) in &self.rows {
            let mut record = vec![model.clone()];
            for cell in cells {
                record.push(match cell {
                    Some(c) => format_percent(c.correct, c.count),
                    None => String::new(),
                });
            }
            w.write_record(&record).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("csv utf8")
    }
}

/// Per-dataset accuracy difference (base minus model) in percentage-point
/// hundredths, plus the exact total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgettingGap {
    pub per_dataset: Vec<(String, i64)>,
    pub total: i64,
}

/// Gap between a model row and a base row of the same report, in rounded
/// percentage points (matching the printed tables). Positive means the
/// model lost accuracy relative to the base.
pub fn forgetting_gap(
    report: &AccuracyReport,
    model: &str,
    base: &str,
) -> Result<ForgettingGap, MetricsError> {
    let model_row = report
        .row(model)
        .ok_or_else(|| MetricsError::UnknownRow(model.to_string()))?;
    let base_row = report
        .row(base)
        .ok_or_else(|| MetricsError::UnknownRow(base.to_string()))?;
    let missing =
        |row: &[Option<CellStats>]| -> Vec<String> { self_columns(&report.datasets, row) };
    if missing(model_row) != missing(base_row) {
        return Err(MetricsError::ColumnMismatch {
            left: missing(model_row),
            right: missing(base_row),
        });
    }
    let mut per_dataset = Vec::new();
    let mut total = 0i64;
    for (i, dataset) in report.datasets.iter().enumerate() {
        if let (Some(m), Some(b)) = (&model_row[i], &base_row[i]) {
            let gap = b.accuracy_hundredths() - m.accuracy_hundredths();
            total += gap;
            per_dataset.push((dataset.clone(), gap));
        }
    }
    Ok(ForgettingGap { per_dataset, total })
}

fn self_columns(datasets: &[String], row: &[Option<CellStats>]) -> Vec<String> {
    datasets
        .iter()
        .zip(row)
        .filter(|(_, c)| c.is_some())
        .map(|(d, _)| d.clone())
        .collect()
}

/// Per truth-label lists of the most frequent predictions with percentages
/// (integer hundredths), sorted by frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKDistribution {
    pub k: usize,
    /// truth label (display form) -> [(prediction bucket, hundredths)].
    pub per_truth: BTreeMap<String, Vec<(String, i64)>>,
}

/// Prediction bucket for a record: the first matched label in display form
/// when anything matched, otherwise the verbatim output text.
pub fn prediction_bucket(record: &RunRecord) -> String {
    match record.matched.first() {
        Some(label) => label.replace('_', " "),
        None => record.output.clone(),
    }
}

/// Tally the k most frequent prediction buckets per truth label.
pub fn top_k_distribution(
    records: &[RunRecord],
    k: usize,
) -> Result<TopKDistribution, MetricsError> {
    if k < 1 {
        return Err(MetricsError::InvalidK);
    }
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut tallies: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for r in records {
        let truth = r.truth.replace('_', " ");
        *tallies
            .entry(truth.clone())
            .or_default()
            .entry(prediction_bucket(r))
            .or_insert(0) += 1;
        *totals.entry(truth).or_insert(0) += 1;
    }
    let mut per_truth = BTreeMap::new();
    for (truth, buckets) in tallies {
        let total = totals[&truth];
        let mut entries: Vec<(String, u64)> = buckets.into_iter().collect();
        // Count descending, bucket name ascending on ties.
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(k);
        per_truth.insert(
            truth,
            entries
                .into_iter()
                .map(|(bucket, count)| (bucket, percent_hundredths(count, total)))
                .collect(),
        );
    }
    Ok(TopKDistribution { k, per_truth })
}

/// Sort records by id (the canonical emission order).
pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.id.cmp(&b.id));
}

/// Serialize records as JSON Lines, sorted by id.
pub fn records_to_jsonl(records: &[RunRecord]) -> String {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for r in sorted {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parse a JSONL record stream, reporting the offending line on error.
pub fn records_from_jsonl(text: &str) -> Result<Vec<RunRecord>, MetricsError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord =
            serde_json::from_str(line).map_err(|source| MetricsError::ParseRecord {
                line: i + 1,
                source,
            })?;
        records.push(record);
    }
    Ok(records)
}

/// One (x, series, value) point of plottable curve data.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub series: String,
    pub value: f64,
}

/// Write curve data as CSV with the fixed header `epoch,series,value`.
/// The x column carries whatever the curve is indexed by (epoch, ratio...).
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "series", "value"])
        .map_err(csv_io)?;
    for p in points {
        w.write_record([format!("{}", p.x), p.series.clone(), format!("{}", p.value)])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> MetricsError {
    MetricsError::Io(std::io::Error::other(e))
}

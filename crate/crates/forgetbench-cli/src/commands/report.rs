//! Report building: accuracy matrix, verdict histograms, top-k prediction
//! tables, and forgetting gaps against an optional base run.

use anyhow::{bail, Context, Result};
use forgetbench::metrics::{
    build_report, forgetting_gap, format_hundredths, records_from_jsonl, sort_records,
    top_k_distribution, RunRecord,
};
use forgetbench::postproc::Verdict;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

const VERDICT_ORDER: [Verdict; 5] = [
    Verdict::Correct,
    Verdict::Incorrect,
    Verdict::IntrinsicHallucination,
    Verdict::ExtrinsicHallucination,
    Verdict::Unparseable,
];

pub struct ReportSummary {
    pub report_csv: PathBuf,
    pub verdicts_csv: PathBuf,
    pub topk_csv: PathBuf,
    pub gaps_csv: Option<PathBuf>,
    pub summary_json: PathBuf,
}

#[derive(Serialize)]
struct SummaryJson {
    schema_version: u32,
    datasets: Vec<String>,
    models: Vec<String>,
    /// model -> dataset -> accuracy in percentage-point hundredths.
    accuracy_hundredths: BTreeMap<String, BTreeMap<String, i64>>,
    /// model -> dataset -> strategies seen in the records.
    strategies: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    /// dataset -> prompt digests seen.
    prompt_digests: BTreeMap<String, Vec<String>>,
    base_model: Option<String>,
    /// model -> (dataset -> gap, total) against the base, in hundredths.
    gaps: Option<BTreeMap<String, GapJson>>,
}

#[derive(Serialize)]
struct GapJson {
    per_dataset: BTreeMap<String, i64>,
    total: i64,
}

fn load_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read records {}", path.display()))?;
        records.extend(records_from_jsonl(&text)?);
    }
    Ok(records)
}

/// Build all report artifacts from one or more record files. When `base` is
/// given, its (single) model becomes the reference row for forgetting gaps.
pub fn cmd_report(
    records_paths: &[PathBuf],
    base_path: Option<&Path>,
    top_k: usize,
    out_dir: &Path,
) -> Result<ReportSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut records = load_records(records_paths)?;
    let base_model = match base_path {
        Some(path) => {
            let base_records = load_records(&[path.to_path_buf()])?;
            let models: BTreeSet<String> = base_records.iter().map(|r| r.model.clone()).collect();
            if models.len() != 1 {
                bail!(
                    "base file {} must contain exactly one model, found {:?}",
                    path.display(),
                    models
                );
            }
            records.extend(base_records);
            Some(models.into_iter().next().expect("one model"))
        }
        None => None,
    };
    sort_records(&mut records);
    let report = build_report(&records)?;

    let report_csv = out_dir.join("report.csv");
    std::fs::write(&report_csv, report.to_csv())?;

    // Verdict histogram per cell.
    let verdicts_csv = out_dir.join("verdicts.csv");
    {
        let mut w = csv::Writer::from_path(&verdicts_csv)?;
        w.write_record(["checkpoint", "dataset", "verdict", "count"])?;
        for (model, cells) in &report.rows {
            for (dataset, cell) in report.datasets.iter().zip(cells) {
                if let Some(cell) = cell {
                    for verdict in VERDICT_ORDER {
                        let count = cell.histogram.get(&verdict).copied().unwrap_or(0);
                        w.write_record([
                            model.as_str(),
                            dataset.as_str(),
                            verdict.as_str(),
                            &count.to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
    }

    // Top-k predictions per (model, dataset, truth label).
    let topk_csv = out_dir.join("topk.csv");
    {
        let mut w = csv::Writer::from_path(&topk_csv)?;
        w.write_record([
            "checkpoint",
            "dataset",
            "truth",
            "rank",
            "prediction",
            "percent",
        ])?;
        let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
        for record in &records {
            groups
                .entry((record.model.clone(), record.dataset.clone()))
                .or_default()
                .push(record.clone());
        }
        for ((model, dataset), group) in &groups {
            let dist = top_k_distribution(group, top_k)?;
            for (truth, entries) in &dist.per_truth {
                for (rank, (prediction, hundredths)) in entries.iter().enumerate() {
                    w.write_record([
                        model.as_str(),
                        dataset.as_str(),
                        truth.as_str(),
                        &(rank + 1).to_string(),
                        prediction.as_str(),
                        &format!("{}%", format_hundredths(*hundredths)),
                    ])?;
                }
            }
        }
        w.flush()?;
    }

    // Forgetting gaps against the base row.
    let mut gaps_json: Option<BTreeMap<String, GapJson>> = None;
    let gaps_csv = if let Some(base) = &base_model {
        let path = out_dir.join("gaps.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["checkpoint", "dataset", "gap_points"])?;
        let mut all = BTreeMap::new();
        for (model, _) in &report.rows {
            if model == base {
                continue;
            }
            let gap = forgetting_gap(&report, model, base)?;
            for (dataset, points) in &gap.per_dataset {
                w.write_record([
                    model.as_str(),
                    dataset.as_str(),
                    &format_hundredths(*points),
                ])?;
            }
            w.write_record([model.as_str(), "TOTAL", &format_hundredths(gap.total)])?;
            all.insert(
                model.clone(),
                GapJson {
                    per_dataset: gap.per_dataset.iter().cloned().collect(),
                    total: gap.total,
                },
            );
        }
        w.flush()?;
        gaps_json = Some(all);
        Some(path)
    } else {
        None
    };

    // Provenance and machine-readable numbers.
    let mut accuracy = BTreeMap::new();
    for (model, cells) in &report.rows {
        let mut row = BTreeMap::new();
        for (dataset, cell) in report.datasets.iter().zip(cells) {
            if let Some(cell) = cell {
                row.insert(dataset.clone(), cell.accuracy_hundredths());
            }
        }
        accuracy.insert(model.clone(), row);
    }
    let mut strategies: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
    let mut digests: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for record in &records {
        strategies
            .entry(record.model.clone())
            .or_default()
            .entry(record.dataset.clone())
            .or_default()
            .insert(record.strategy.clone());
        digests
            .entry(record.dataset.clone())
            .or_default()
            .insert(record.prompt_digest.clone());
    }
    let summary = SummaryJson {
        schema_version: 1,
        datasets: report.datasets.clone(),
        models: report.rows.iter().map(|(m, _)| m.clone()).collect(),
        accuracy_hundredths: accuracy,
        strategies: strategies
            .into_iter()
            .map(|(m, by_ds)| {
                (
                    m,
                    by_ds
                        .into_iter()
                        .map(|(d, s)| (d, s.into_iter().collect()))
                        .collect(),
                )
            })
            .collect(),
        prompt_digests: digests
            .into_iter()
            .map(|(d, s)| (d, s.into_iter().collect()))
            .collect(),
        base_model,
        gaps: gaps_json,
    };
    let summary_json = out_dir.join("summary.json");
    std::fs::write(&summary_json, serde_json::to_string_pretty(&summary)?)?;

    Ok(ReportSummary {
        report_csv,
        verdicts_csv,
        topk_csv,
        gaps_csv,
        summary_json,
    })
}

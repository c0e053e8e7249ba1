//! The evaluation pipeline: dataset manifests in, graded records and an
//! accuracy report out. Queries run through the caching client with bounded
//! concurrency; records append to a JSONL sink as they complete, so an
//! interrupted run resumes from the cache plus the processed-id set.

use crate::config::{RunConfig, StrategyKind};
use anyhow::{bail, Context, Result};
use forgetbench::client::{ChatRequest, Client, ImageData};
use forgetbench::datasets::{load_manifest, sample_eval_subset, DatasetManifest, LabelSet};
use forgetbench::metrics::{
    build_report, records_from_jsonl, records_to_jsonl, sort_records, RunRecord,
};
use forgetbench::postproc::{
    classify_verdict, embed_match, judge_parse, rule_match_aliased, AliasMap, EmbeddingTable,
    PostprocError, Verdict,
};
use forgetbench::prompts::{classification_prompt, judge_prompt};
use forgetbench::sha256_hex;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug)]
pub struct EvalSummary {
    pub records_path: PathBuf,
    pub report_path: PathBuf,
    pub config_path: PathBuf,
    pub total_records: usize,
    pub new_records: usize,
}

struct WorkItem {
    id: String,
    dataset: usize,
    image_ref: String,
    truth_index: usize,
}

struct DatasetContext {
    name: String,
    labels: LabelSet,
    prompt_text: String,
    prompt_digest: String,
    base_dir: PathBuf,
}

struct EvalContext {
    config: RunConfig,
    datasets: Vec<DatasetContext>,
    client: Client,
    judge_client: Option<Client>,
    embed_client: Option<Client>,
    embed_table: Option<EmbeddingTable>,
    aliases: AliasMap,
    abort: AtomicBool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Guess a media type from the image reference extension. Fixtures use
/// plain-text "images"; the bytes are forwarded opaquely either way.
fn media_type(image_ref: &str) -> &'static str {
    match Path::new(image_ref)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary> {
    if config.manifests.is_empty() {
        bail!("no manifests configured");
    }
    if config.eval_fraction.is_nan() || config.eval_fraction <= 0.0 || config.eval_fraction > 1.0 {
        bail!("eval_fraction must lie in (0, 1]");
    }
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("cannot create {}", config.out_dir.display()))?;

    // Freeze the effective config alongside the outputs. The resume flag
    // is normalized out (the snapshot describes the run's content, and a
    // replay against the cache reproduces it bit-identically either way),
    // the effective sampling parameters are materialized, and the
    // subsampling PRNG is named so the run is fully described.
    let config_path = config.out_dir.join("config.json");
    let snapshot = RunConfig {
        resume: false,
        sampling: Some(config.sampling_params()),
        ..config.clone()
    };
    let mut snapshot_json = serde_json::to_value(&snapshot).expect("config serializes");
    snapshot_json["subsample_rng"] = serde_json::Value::String("chacha12".into());
    std::fs::write(
        &config_path,
        serde_json::to_string_pretty(&snapshot_json).expect("config serializes"),
    )?;

    let records_path = config.out_dir.join("records.jsonl");
    let mut existing: Vec<RunRecord> = Vec::new();
    if config.resume {
        if !records_path.exists() {
            bail!(
                "--resume requires an existing record file at {}",
                records_path.display()
            );
        }
        let text = std::fs::read_to_string(&records_path)?;
        existing = records_from_jsonl(&text)?;
    } else if records_path.exists() {
        std::fs::remove_file(&records_path)?;
    }
    let processed: BTreeSet<String> = existing.iter().map(|r| r.id.clone()).collect();

    let cache_dir = config.out_dir.join("cache");
    let client = Client::with_cache(config.endpoint.clone(), &cache_dir)?;
    let judge_client = match config.strategy {
        StrategyKind::Judge => Some(Client::with_cache(config.judge_endpoint(), &cache_dir)?),
        _ => None,
    };
    let embed_client = match config.strategy {
        StrategyKind::Embed => Some(Client::with_cache(config.embed_endpoint(), &cache_dir)?),
        _ => None,
    };
    let embed_table = match config.strategy {
        StrategyKind::Embed => {
            let path = config
                .embed_table
                .as_ref()
                .context("embed strategy requires embed_table in the config")?;
            Some(EmbeddingTable::load(path)?)
        }
        _ => None,
    };
    let aliases = match &config.alias_file {
        Some(path) => AliasMap::load(path)?,
        None => AliasMap::default(),
    };

    // Load manifests and build per-dataset contexts plus the work queue.
    let mut datasets = Vec::new();
    let mut work = Vec::new();
    for manifest_path in &config.manifests {
        let manifest = load_manifest(manifest_path)?;
        let subset = if config.eval_fraction < 1.0 {
            sample_eval_subset(
                &manifest,
                config.eval_fraction,
                config.eval_seed,
                config.stratified,
            )?
        } else {
            manifest
        };
        let prompt = classification_prompt(&subset.labels, subset.kind);
        let base_dir = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let dataset_index = datasets.len();
        for (item_index, item) in subset.items.iter().enumerate() {
            let id = format!("{}:{item_index}", subset.name);
            if processed.contains(&id) {
                continue;
            }
            work.push(WorkItem {
                id,
                dataset: dataset_index,
                image_ref: item.image.clone(),
                truth_index: item.label,
            });
        }
        datasets.push(DatasetContext {
            name: subset.name.clone(),
            prompt_digest: sha256_hex(prompt.text.as_bytes()),
            prompt_text: prompt.text,
            labels: subset.labels,
            base_dir,
        });
    }

    let context = Arc::new(EvalContext {
        config: config.clone(),
        datasets,
        client,
        judge_client,
        embed_client,
        embed_table,
        aliases,
        abort: AtomicBool::new(false),
    });

    // Single-writer sink fed by a bounded worker pool.
    let mut sink = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)?;
    let new_count = work.len();
    let workers = config.endpoint.parallelism.max(1).min(work.len().max(1));
    let work = Arc::new(work);
    let (sender, receiver) = mpsc::channel::<Result<RunRecord, String>>();
    let mut handles = Vec::new();
    for worker in 0..workers {
        let context = Arc::clone(&context);
        let work = Arc::clone(&work);
        let sender = sender.clone();
        handles.push(std::thread::spawn(move || {
            let mut index = worker;
            while index < work.len() {
                if context.abort.load(Ordering::SeqCst) {
                    break;
                }
                let outcome = evaluate_item(&context, &work[index])
                    .map_err(|e| format!("{}: {e:#}", work[index].id));
                if outcome.is_err() {
                    context.abort.store(true, Ordering::SeqCst);
                }
                if sender.send(outcome).is_err() {
                    break;
                }
                index += workers;
            }
        }));
    }
    drop(sender);

    let mut records = existing;
    let mut first_error: Option<String> = None;
    for outcome in receiver {
        match outcome {
            Ok(record) => {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(sink, "{line}")?;
                sink.flush()?;
                records.push(record);
            }
            Err(message) => {
                if first_error.is_none() {
                    first_error = Some(message);
                }
            }
        }
    }
    for handle in handles {
        let _ = handle.join();
    }
    if let Some(message) = first_error {
        bail!(
            "evaluation aborted ({message}); partial records kept at {}",
            records_path.display()
        );
    }

    sort_records(&mut records);
    let report = build_report(&records)?;
    let report_path = config.out_dir.join("report.csv");
    std::fs::write(&report_path, report.to_csv())?;
    Ok(EvalSummary {
        records_path,
        report_path,
        config_path,
        total_records: records.len(),
        new_records: new_count,
    })
}

fn evaluate_item(context: &EvalContext, item: &WorkItem) -> Result<RunRecord> {
    let dataset = &context.datasets[item.dataset];
    let image_path = dataset.base_dir.join(&item.image_ref);
    let bytes = std::fs::read(&image_path)
        .with_context(|| format!("cannot read image {}", image_path.display()))?;
    let request = ChatRequest {
        prompt: dataset.prompt_text.clone(),
        image: Some(ImageData {
            bytes,
            media_type: media_type(&item.image_ref).to_string(),
        }),
        params: context.config.sampling_params(),
        system: context.config.system_message.clone(),
    };
    let started_ms = now_ms();
    let response = context.client.complete(&request)?;
    let truth = dataset.labels.canonical(item.truth_index).to_string();
    let graded = grade(
        context,
        &dataset.labels,
        &truth,
        item.truth_index,
        &response.text,
    )?;
    Ok(RunRecord {
        schema_version: 1,
        id: item.id.clone(),
        dataset: dataset.name.clone(),
        model: context.config.endpoint.model_name.clone(),
        truth,
        prompt_digest: dataset.prompt_digest.clone(),
        output: response.text,
        strategy: context.config.strategy.as_str().to_string(),
        verdict: graded.verdict,
        matched: graded.matched,
        judge_text: graded.judge_text,
        embed_label: graded.embed_label,
        embed_distance: graded.embed_distance,
        started_ms,
        finished_ms: now_ms(),
    })
}

struct Graded {
    verdict: Verdict,
    matched: Vec<String>,
    judge_text: Option<String>,
    embed_label: Option<String>,
    embed_distance: Option<f64>,
}

/// Apply the configured strategy to a raw output.
fn grade(
    context: &EvalContext,
    labels: &LabelSet,
    truth: &str,
    truth_index: usize,
    output: &str,
) -> Result<Graded> {
    let matches = rule_match_aliased(output, labels, &context.aliases)?;
    let matched = matches.matched_canonical();
    match context.config.strategy {
        StrategyKind::Rule => Ok(Graded {
            verdict: classify_verdict(truth, output, &matches, None),
            matched,
            judge_text: None,
            embed_label: None,
            embed_distance: None,
        }),
        StrategyKind::Judge => {
            if output.trim().is_empty() {
                return Ok(Graded {
                    verdict: Verdict::Unparseable,
                    matched,
                    judge_text: None,
                    embed_label: None,
                    embed_distance: None,
                });
            }
            let judge = context.judge_client.as_ref().expect("judge client built");
            let prompt = judge_prompt(&labels.display(truth_index), output);
            let reply = judge.judge_complete(&prompt, &context.config.judge_params)?;
            match judge_parse(&reply.text) {
                Ok(answer) => Ok(Graded {
                    verdict: classify_verdict(truth, output, &matches, Some(answer)),
                    matched,
                    judge_text: Some(reply.text),
                    embed_label: None,
                    embed_distance: None,
                }),
                Err(PostprocError::UnparseableJudge { raw }) => Ok(Graded {
                    verdict: Verdict::Unparseable,
                    matched,
                    judge_text: Some(raw),
                    embed_label: None,
                    embed_distance: None,
                }),
                Err(other) => Err(other.into()),
            }
        }
        StrategyKind::Embed => {
            if output.trim().is_empty() {
                return Ok(Graded {
                    verdict: Verdict::Unparseable,
                    matched,
                    judge_text: None,
                    embed_label: None,
                    embed_distance: None,
                });
            }
            let table = context.embed_table.as_ref().expect("table loaded");
            let client = context.embed_client.as_ref().expect("embed client built");
            let vector = client.fetch_embedding(output)?;
            let nearest = embed_match(&vector, table)?;
            // Nearest-label grading knows only right or wrong.
            let verdict = if nearest.class_index == truth_index {
                Verdict::Correct
            } else {
                Verdict::Incorrect
            };
            Ok(Graded {
                verdict,
                matched,
                judge_text: None,
                embed_label: Some(nearest.label),
                embed_distance: Some(nearest.distance),
            })
        }
    }
}

/// Re-grade stored raw outputs under a different strategy. Identity fields
/// (id, dataset, model, truth, prompt digest, output, timestamps) are
/// preserved; strategy, verdict, matches and the strategy-specific fields
/// are recomputed.
pub fn cmd_judge(
    config: &RunConfig,
    records_path: &Path,
    strategy: StrategyKind,
    output_path: Option<&Path>,
) -> Result<PathBuf> {
    let text = std::fs::read_to_string(records_path)
        .with_context(|| format!("cannot read records {}", records_path.display()))?;
    let mut records = records_from_jsonl(&text)?;
    sort_records(&mut records);

    // Label sets come from the configured manifests, keyed by dataset name.
    let mut label_sets: Vec<(String, LabelSet)> = Vec::new();
    for manifest_path in &config.manifests {
        let manifest: DatasetManifest = load_manifest(manifest_path)?;
        label_sets.push((manifest.name.clone(), manifest.labels));
    }
    let labels_for = |dataset: &str| -> Result<&LabelSet> {
        label_sets
            .iter()
            .find(|(name, _)| name == dataset)
            .map(|(_, l)| l)
            .with_context(|| format!("no configured manifest has dataset name {dataset:?}"))
    };

    let cache_dir = config.out_dir.join("cache");
    let mut regrade_config = config.clone();
    regrade_config.strategy = strategy;
    let context = EvalContext {
        judge_client: match strategy {
            StrategyKind::Judge => Some(Client::with_cache(config.judge_endpoint(), &cache_dir)?),
            _ => None,
        },
        embed_client: match strategy {
            StrategyKind::Embed => Some(Client::with_cache(config.embed_endpoint(), &cache_dir)?),
            _ => None,
        },
        embed_table: match strategy {
            StrategyKind::Embed => {
                let path = regrade_config
                    .embed_table
                    .as_ref()
                    .context("embed strategy requires embed_table in the config")?;
                Some(EmbeddingTable::load(path)?)
            }
            _ => None,
        },
        aliases: match &config.alias_file {
            Some(path) => AliasMap::load(path)?,
            None => AliasMap::default(),
        },
        client: Client::with_cache(config.endpoint.clone(), &cache_dir)?,
        config: regrade_config,
        datasets: Vec::new(),
        abort: AtomicBool::new(false),
    };

    for record in &mut records {
        let labels = labels_for(&record.dataset)?;
        let truth_index = labels.index_of(&record.truth).with_context(|| {
            format!(
                "truth {:?} not in dataset {:?}",
                record.truth, record.dataset
            )
        })?;
        let graded = grade(&context, labels, &record.truth, truth_index, &record.output)?;
        record.strategy = strategy.as_str().to_string();
        record.verdict = graded.verdict;
        record.matched = graded.matched;
        record.judge_text = graded.judge_text;
        record.embed_label = graded.embed_label;
        record.embed_distance = graded.embed_distance;
    }

    let out = output_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| records_path.with_extension("regraded.jsonl"));
    std::fs::write(&out, records_to_jsonl(&records))?;
    Ok(out)
}

//! CLI wrappers over the collapse lab: the constrained solver, the
//! imbalance sweep, the class-split forgetting run, and the adapter
//! simulator. Each writes curve-data CSV plus a JSON summary.

use anyhow::{bail, Context, Result};
use forgetbench::collapse::{
    adapter_sim, collapse_metrics, imbalance_sweep, reinit_variants, solve_layer_peeled, train_toy,
    AdapterMode, AdapterRun, AdapterSimConfig, CollapseMetrics, ForgettingRun, LayerPeeledProblem,
    SolveOpts, ToyTrainConfig,
};
use forgetbench::metrics::{write_curve_csv, CurvePoint};
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {what} {}", path.display()))
}

#[derive(Serialize)]
struct SolveJson<'a> {
    problem: &'a LayerPeeledProblem,
    opts: &'a SolveOpts,
    converged: bool,
    iterations: usize,
    objective: f64,
    final_grad_norm: f64,
    metrics: &'a CollapseMetrics,
}

pub fn cmd_collapse_solve(
    problem_path: &Path,
    opts: &SolveOpts,
    out_dir: &Path,
) -> Result<PathBuf> {
    let problem: LayerPeeledProblem = load_json(problem_path, "problem file")?;
    problem.validate().map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(out_dir)?;
    let outcome = solve_layer_peeled(&problem, opts)?;
    let metrics = collapse_metrics(&outcome.state, problem.k_a)?;
    let path = out_dir.join("solution.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&SolveJson {
            problem: &problem,
            opts,
            converged: outcome.converged,
            iterations: outcome.iterations,
            objective: outcome.objective,
            final_grad_norm: outcome.final_grad_norm,
            metrics: &metrics,
        })?,
    )?;
    println!(
        "solve: objective {:.6}, etf deviation {:.4}, converged {} ({} iterations)",
        outcome.objective, metrics.etf_deviation, outcome.converged, outcome.iterations
    );
    Ok(path)
}

pub fn cmd_collapse_sweep(
    problem_path: &Path,
    ratios: &[f64],
    opts: &SolveOpts,
    out_dir: &Path,
) -> Result<PathBuf> {
    if ratios.is_empty() {
        bail!("no ratios given");
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    if sorted != ratios {
        bail!("ratios must be sorted ascending");
    }
    let problem: LayerPeeledProblem = load_json(problem_path, "problem file")?;
    problem.validate().map_err(anyhow::Error::from)?;
    std::fs::create_dir_all(out_dir)?;

    let rows = imbalance_sweep(&problem, ratios, opts);
    let mut points = Vec::new();
    let mut row_json = Vec::new();
    let mut failures = 0;
    for row in &rows {
        match &row.result {
            Ok((outcome, metrics)) => {
                points.push(CurvePoint {
                    x: row.ratio,
                    series: "objective".into(),
                    value: outcome.objective,
                });
                points.push(CurvePoint {
                    x: row.ratio,
                    series: "etf_deviation".into(),
                    value: metrics.etf_deviation,
                });
                if let Some(cosine) = metrics.minority_mean_cosine {
                    points.push(CurvePoint {
                        x: row.ratio,
                        series: "minority_mean_cosine".into(),
                        value: cosine,
                    });
                }
                if let Some(distance) = metrics.minority_max_pair_distance {
                    points.push(CurvePoint {
                        x: row.ratio,
                        series: "minority_max_pair_distance".into(),
                        value: distance,
                    });
                }
                row_json.push(json!({
                    "ratio": row.ratio,
                    "n_a": row.n_a,
                    "converged": outcome.converged,
                    "objective": outcome.objective,
                    "metrics": metrics,
                }));
            }
            Err(error) => {
                failures += 1;
                row_json
                    .push(json!({"ratio": row.ratio, "n_a": row.n_a, "error": error.to_string()}));
            }
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    let file = std::fs::File::create(&csv_path)?;
    write_curve_csv(&points, file)?;
    std::fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&json!({
            "problem": problem,
            "opts": opts,
            "rows": row_json,
        }))?,
    )?;
    println!(
        "sweep: {} ratios, {} failed, curves at {}",
        rows.len(),
        failures,
        csv_path.display()
    );
    if failures > 0 {
        bail!("{failures} ratio(s) failed to solve; see sweep.json");
    }
    Ok(csv_path)
}

fn forgetting_points(prefix: &str, run: &ForgettingRun, points: &mut Vec<CurvePoint>) {
    for (epoch, (&pre, &fin)) in run.pretrain_acc.iter().zip(&run.finetune_acc).enumerate() {
        points.push(CurvePoint {
            x: epoch as f64,
            series: format!("{prefix}pretrain_acc"),
            value: pre,
        });
        points.push(CurvePoint {
            x: epoch as f64,
            series: format!("{prefix}finetune_acc"),
            value: fin,
        });
    }
}

/// Run the class-split forgetting simulation; with `variants` the
/// classifier/optimizer re-initialization runs are overlaid.
pub fn cmd_forget_sim(
    config_path: Option<&Path>,
    variants: bool,
    seed: Option<u64>,
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut config: ToyTrainConfig = match config_path {
        Some(path) => load_json(path, "training config")?,
        None => ToyTrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
        config.synthetic.seed = seed;
    }
    std::fs::create_dir_all(out_dir)?;
    let mut points = Vec::new();
    let summary = if variants {
        let comparison = reinit_variants(&config)?;
        for (name, run) in comparison.series() {
            forgetting_points(&format!("{name}/"), run, &mut points);
        }
        json!({
            "phase_boundary": comparison.baseline.phase_boundary,
            "series": ["baseline", "reinit_classifier", "reinit_optimizer"],
            "baseline_min_phase2_pretrain_acc": min_phase2(&comparison.baseline),
            "reinit_classifier_min_phase2_pretrain_acc": min_phase2(&comparison.reinit_classifier),
            "config": comparison.baseline.config,
        })
    } else {
        let run = train_toy(&config)?;
        forgetting_points("", &run, &mut points);
        json!({
            "phase_boundary": run.phase_boundary,
            "series": ["baseline"],
            "phase1_end_pretrain_acc": run.pretrain_acc[run.phase_boundary - 1],
            "min_phase2_pretrain_acc": min_phase2(&run),
            "config": run.config,
        })
    };
    let csv_path = out_dir.join("curves.csv");
    write_curve_csv(&points, std::fs::File::create(&csv_path)?)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("forget-sim: curves at {}", csv_path.display());
    Ok(csv_path)
}

fn min_phase2(run: &ForgettingRun) -> f64 {
    run.pretrain_acc[run.phase_boundary..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Run the adapter simulator in one or both modes over a block of seeds and
/// emit per-seed curves plus mean task-B drops.
pub fn cmd_adapter_sim(
    config_path: Option<&Path>,
    modes: &[AdapterMode],
    seeds: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let base: AdapterSimConfig = match config_path {
        Some(path) => load_json(path, "adapter config")?,
        None => AdapterSimConfig::default(),
    };
    std::fs::create_dir_all(out_dir)?;
    let mut points = Vec::new();
    let mut summary_modes = serde_json::Map::new();
    for &mode in modes {
        let mut drops = Vec::new();
        let mut runs: Vec<AdapterRun> = Vec::new();
        for offset in 0..seeds {
            let config = AdapterSimConfig {
                mode,
                seed: base.seed + offset,
                ..base.clone()
            };
            let run = adapter_sim(&config)?;
            let prefix = format!("{}/seed{}/", mode_name(mode), config.seed);
            for (epoch, (&a, &b)) in run.task_a_acc.iter().zip(&run.task_b_acc).enumerate() {
                points.push(CurvePoint {
                    x: epoch as f64,
                    series: format!("{prefix}task_a"),
                    value: a,
                });
                points.push(CurvePoint {
                    x: epoch as f64,
                    series: format!("{prefix}task_b"),
                    value: b,
                });
            }
            drops.push(run.task_b_drop());
            runs.push(run);
        }
        let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
        summary_modes.insert(
            mode_name(mode).to_string(),
            json!({
                "mean_task_b_drop": mean_drop,
                "per_seed_task_b_drop": drops,
                "head_unchanged": runs
                    .iter()
                    .all(|r| r.head_digest_before == r.head_digest_after),
            }),
        );
    }
    let csv_path = out_dir.join("curves.csv");
    write_curve_csv(&points, std::fs::File::create(&csv_path)?)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&json!({
            "seeds": seeds,
            "finetune_epochs": base.finetune_epochs,
            "modes": summary_modes,
        }))?,
    )?;
    println!("adapter-sim: curves at {}", csv_path.display());
    Ok(csv_path)
}

fn mode_name(mode: AdapterMode) -> &'static str {
    match mode {
        AdapterMode::Linear => "linear",
        AdapterMode::Lora => "lora",
    }
}

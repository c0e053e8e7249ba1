//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured margin (run with `--nocapture` to see them).

mod common;

use common::{mock_run_config, start_mock, write_text_image_manifest, PERFECT_CLASSIFIER_SCRIPT};
use forgetbench::collapse::{
    adapter_sim, collapse_metrics, gradients, imbalance_sweep, reinit_variants, solve_layer_peeled,
    AdapterMode, AdapterSimConfig, Features, LayerPeeledProblem, LayerPeeledState, SolveOpts,
    ToyTrainConfig,
};
use forgetbench::datasets::{DatasetKind, LabelSet};
use forgetbench::metrics::{format_percent, top_k_distribution, RunRecord};
use forgetbench::postproc::{classify_verdict, embed_match, rule_match, EmbeddingTable, Verdict};
use forgetbench::prompts::{classification_prompt, finetune_record, judge_prompt, JudgeParams};
use forgetbench_cli::commands::{cmd_eval, cmd_report};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn mnist_labels() -> LabelSet {
    LabelSet::new((0..10).map(|d| d.to_string()).collect()).unwrap()
}

fn cifar10_labels() -> LabelSet {
    LabelSet::new(
        [
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_prompt_goldens() {
    let started = Instant::now();
    let mnist = classification_prompt(&mnist_labels(), DatasetKind::Digit);
    assert_eq!(
        mnist.text,
        "What is the number in the image? Please only answer a single number in 0, 1, 2, 3, 4, 5, 6, 7, 8, 9."
    );
    let cifar = classification_prompt(&cifar10_labels(), DatasetKind::Object);
    assert_eq!(
        cifar.text,
        "What is the object in the image? Please only answer a single object in airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck."
    );
    let judge = judge_prompt("airplane", "The object is an airplane.");
    assert_eq!(
        judge.text,
        "Please only answer the question in yes or no. Is the \"Prediction\" correctly predicting the right \"Label\"? Label: airplane; Prediction: The object is an airplane.."
    );
    let params = JudgeParams::default();
    assert_eq!(
        (params.temperature, params.max_tokens, params.top_p),
        (0.2, 64, 1.0)
    );
    let record = finetune_record("airplane/2604.jpg", "airplane");
    assert_eq!(
        record.to_json(),
        r#"{"image":"airplane/2604.jpg","conversations":[{"from":"human","value":"What is the object in the image? <image>"},{"from":"gpt","value":"The object is a(n) airplane."}]}"#
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!("[acceptance 1] PASS prompt goldens byte-match ({elapsed:?})");
}

#[test]
fn criterion_02_verdict_taxonomy() {
    let started = Instant::now();
    // Wrong digit: single non-truth label.
    let output = "The number in the image is 8";
    let matches = rule_match(output, &mnist_labels());
    assert_eq!(
        classify_verdict("0", output, &matches, Some(false)),
        Verdict::Incorrect
    );
    // Many labels when one was demanded.
    let output = "airplane, automobile, bird, cat, deer, dog, frog, horse,";
    let matches = rule_match(output, &cifar10_labels());
    assert_eq!(
        classify_verdict("horse", output, &matches, Some(false)),
        Verdict::IntrinsicHallucination
    );
    // Free-form description with no verifiable label.
    let cifar100ish =
        LabelSet::new(vec!["aquarium_fish".into(), "bowl".into(), "shark".into()]).unwrap();
    let output = "a picture of a fish in a tank";
    let matches = rule_match(output, &cifar100ish);
    assert_eq!(
        classify_verdict("aquarium_fish", output, &matches, Some(false)),
        Verdict::ExtrinsicHallucination
    );
    // Truth named but the claim itself unverifiable (judge said no).
    let output = "The airplane is 8.";
    let matches = rule_match(output, &cifar10_labels());
    assert_eq!(
        classify_verdict("airplane", output, &matches, Some(false)),
        Verdict::ExtrinsicHallucination
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!("[acceptance 2] PASS verdict taxonomy on the four exemplar outputs ({elapsed:?})");
}

#[test]
fn criterion_03_embedding_match_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let k = 50;
    let dim = 16;
    let vectors: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let table = EmbeddingTable::new(
        LabelSet::new((0..k).map(|i| format!("label_{i}")).collect()).unwrap(),
        vectors.clone(),
        false,
    )
    .unwrap();
    let mut agreements = 0;
    for _ in 0..200 {
        let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = embed_match(&query, &table).unwrap();
        // Exhaustive-scan oracle, first minimum wins.
        let mut best = (f64::INFINITY, usize::MAX);
        for (index, vector) in vectors.iter().enumerate() {
            let dist = query
                .iter()
                .zip(vector)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < best.0 {
                best = (dist, index);
            }
        }
        assert_eq!(got.class_index, best.1);
        assert!((got.distance - best.0).abs() < 1e-12);
        agreements += 1;
    }
    assert_eq!(agreements, 200);
    // Declared tie-break: equidistant queries resolve to the lowest index.
    let tie_table = EmbeddingTable::new(
        LabelSet::new(vec!["a".into(), "b".into(), "c".into()]).unwrap(),
        vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        true,
    )
    .unwrap();
    let tied = embed_match(&[0.0, 0.0], &tie_table).unwrap();
    assert_eq!(tied.class_index, 0);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0);
    println!("[acceptance 3] PASS embed match agrees with oracle on 200/200 queries ({elapsed:?})");
}

#[test]
fn criterion_04_balanced_layer_peeled_geometry() {
    let started = Instant::now();
    let problem = LayerPeeledProblem::balanced(4, 8, 1.0, 1.0).unwrap();
    let outcome = solve_layer_peeled(&problem, &SolveOpts::default()).unwrap();
    let metrics = collapse_metrics(&outcome.state, 0).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                worst = worst.max((metrics.pairwise_cosines[a][b] + 1.0 / 3.0).abs());
            }
        }
    }
    assert!(worst < 0.05, "worst off-diagonal deviation {worst}");

    // Gradient check at 100 random feasible points, 1e-5 relative.
    let eps = 1e-6;
    let check_problem = LayerPeeledProblem {
        k: 3,
        p: 4,
        k_a: 1,
        n_a: 4,
        n_b: 1,
        e_w: 1.0,
        e_h: 1.0,
    };
    let mut worst_rel: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut normal = || loop {
            let u1: f64 = rng.gen();
            if u1 > f64::MIN_POSITIVE {
                let u2: f64 = rng.gen();
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        };
        let mut w = Array2::<f64>::zeros((3, 4));
        w.mapv_inplace(|_| normal());
        let mut h = Array2::<f64>::zeros((4, 3));
        h.mapv_inplace(|_| normal());
        // Scale into the interior so eps-perturbed points stay feasible.
        let scale_w = (0.9 / (w.iter().map(|v| v * v).sum::<f64>() / 3.0)).sqrt();
        w.mapv_inplace(|v| v * scale_w);
        let scale_h = (0.9 / (h.iter().map(|v| v * v).sum::<f64>() / 3.0)).sqrt();
        h.mapv_inplace(|v| v * scale_h);
        let state = LayerPeeledState {
            w,
            features: Features::ClassReduced(h),
        };
        let (gw, gh) = gradients(&check_problem, &state).unwrap();
        let objective_at = |state: &LayerPeeledState| {
            forgetbench::collapse::objective(&check_problem, state).unwrap()
        };
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for row in 0..3 {
            for dim in 0..4 {
                let mut plus = state.clone();
                plus.w[[row, dim]] += eps;
                let mut minus = state.clone();
                minus.w[[row, dim]] -= eps;
                let numeric = (objective_at(&plus) - objective_at(&minus)) / (2.0 * eps);
                diff_sq += (gw[[row, dim]] - numeric).powi(2);
                norm_sq += numeric * numeric;
            }
        }
        for dim in 0..4 {
            for col in 0..3 {
                let mut plus = state.clone();
                if let Features::ClassReduced(h) = &mut plus.features {
                    h[[dim, col]] += eps;
                }
                let mut minus = state.clone();
                if let Features::ClassReduced(h) = &mut minus.features {
                    h[[dim, col]] -= eps;
                }
                let numeric = (objective_at(&plus) - objective_at(&minus)) / (2.0 * eps);
                diff_sq += (gh[[dim, col]] - numeric).powi(2);
                norm_sq += numeric * numeric;
            }
        }
        let rel = (diff_sq / norm_sq.max(1e-30)).sqrt();
        worst_rel = worst_rel.max(rel);
    }
    assert!(
        worst_rel < 1e-5,
        "worst gradient relative error {worst_rel:.2e}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0);
    println!(
        "[acceptance 4] PASS balanced solve within {worst:.4} of -1/3; gradient check {worst_rel:.2e} ({elapsed:?})"
    );
}

#[test]
fn criterion_05_minority_collapse_trend() {
    let started = Instant::now();
    let base = LayerPeeledProblem {
        k: 10,
        p: 20,
        k_a: 5,
        n_a: 8,
        n_b: 8,
        e_w: 1.0,
        e_h: 1.0,
    };
    let ratios = [1.0, 10.0, 100.0, 1000.0];
    let rows = imbalance_sweep(&base, &ratios, &SolveOpts::default());
    let mut cosines = Vec::new();
    let mut etf_at_one = f64::NAN;
    for row in &rows {
        let (_, metrics) = row
            .result
            .as_ref()
            .unwrap_or_else(|e| panic!("ratio {} failed: {e}", row.ratio));
        let cosine = metrics.minority_mean_cosine.expect("5 minority classes");
        if row.ratio == 1.0 {
            etf_at_one = metrics.etf_deviation;
        }
        cosines.push(cosine);
    }
    for window in cosines.windows(2) {
        assert!(
            window[1] >= window[0] - 0.02,
            "minority cosine decreased: {cosines:?}"
        );
    }
    let last = *cosines.last().unwrap();
    assert!(last >= 0.9, "final minority cosine {last}");
    assert!(etf_at_one < 0.05, "balanced etf deviation {etf_at_one}");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0);
    println!(
        "[acceptance 5] PASS minority cosine trend {cosines:?}, ratio-1 etf deviation {etf_at_one:.4} ({elapsed:?})"
    );
}

#[test]
fn criterion_06_forgetting_curve_shape_and_reinits() {
    let started = Instant::now();
    let comparison = reinit_variants(&ToyTrainConfig::default()).unwrap();
    let baseline = &comparison.baseline;
    let boundary = baseline.phase_boundary;
    let phase1_end = baseline.pretrain_acc[boundary - 1];
    assert!(phase1_end >= 0.95, "phase-1 end accuracy {phase1_end}");
    let min_within_5 = baseline.pretrain_acc[boundary..boundary + 5]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!(
        min_within_5 <= 0.10,
        "pretrain accuracy within 5 epochs {min_within_5}"
    );

    let optimizer_gap = baseline
        .pretrain_acc
        .iter()
        .zip(&comparison.reinit_optimizer.pretrain_acc)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(optimizer_gap < 0.1, "optimizer-restart gap {optimizer_gap}");

    let min_phase2 = |run: &forgetbench::collapse::ForgettingRun| {
        run.pretrain_acc[boundary..]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };
    let baseline_min = min_phase2(baseline);
    let reinit_min = min_phase2(&comparison.reinit_classifier);
    assert!(
        reinit_min >= baseline_min - 0.02,
        "classifier reinit min {reinit_min} vs baseline {baseline_min}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0);
    println!(
        "[acceptance 6] PASS phase-1 {phase1_end:.3}, collapse to {min_within_5:.3} within 5 epochs, optimizer gap {optimizer_gap:.3} ({elapsed:?})"
    );
}

#[test]
fn criterion_07_adapter_modes_direction() {
    let started = Instant::now();
    let mut linear_drops = Vec::new();
    let mut lora_drops = Vec::new();
    for seed in 0..5u64 {
        let linear = adapter_sim(&AdapterSimConfig {
            mode: AdapterMode::Linear,
            seed,
            ..AdapterSimConfig::default()
        })
        .unwrap();
        assert_eq!(
            linear.head_digest_before, linear.head_digest_after,
            "linear mode must leave head parameters bit-identical"
        );
        let lora = adapter_sim(&AdapterSimConfig {
            mode: AdapterMode::Lora,
            seed,
            ..AdapterSimConfig::default()
        })
        .unwrap();
        linear_drops.push(linear.task_b_drop());
        lora_drops.push(lora.task_b_drop());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let linear_mean = mean(&linear_drops);
    let lora_mean = mean(&lora_drops);
    assert!(
        lora_mean >= linear_mean,
        "lora drop {lora_mean} vs linear {linear_mean}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0);
    println!(
        "[acceptance 7] PASS mean task-B drop lora {lora_mean:.3} >= linear {linear_mean:.3} over 5 seeds ({elapsed:?})"
    );
}

#[test]
fn criterion_08_end_to_end_forgetting_signature() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let task_a_labels = ["airplane", "automobile", "bird", "cat", "deer"];
    let task_b_labels = ["dog", "frog", "horse", "ship", "truck"];
    let manifest_a = write_text_image_manifest(dir.path(), "task_a", &task_a_labels, 2);
    let manifest_b = write_text_image_manifest(dir.path(), "task_b", &task_b_labels, 2);

    // The model under test answers task A perfectly and answers task-B
    // prompts with a task-A label.
    let model_server = start_mock(
        r#"[
        {"match": {"prompt_regex": "airplane, automobile"}, "reply": "The object is a(n) {image_text}."},
        {"match": {}, "reply": "The object is a(n) cat."}
    ]"#,
    );
    let model_config = mock_run_config(
        vec![manifest_a.clone(), manifest_b.clone()],
        &model_server,
        "finetuned-model",
        dir.path().join("model_out"),
    );
    let model_summary = cmd_eval(&model_config).unwrap();
    assert_eq!(model_summary.total_records, 20);

    // The base answers everything perfectly (the zero-shot reference).
    let base_server = start_mock(PERFECT_CLASSIFIER_SCRIPT);
    let base_config = mock_run_config(
        vec![manifest_a, manifest_b],
        &base_server,
        "base-model",
        dir.path().join("base_out"),
    );
    let base_summary = cmd_eval(&base_config).unwrap();

    let report_dir = dir.path().join("report");
    let report = cmd_report(
        std::slice::from_ref(&model_summary.records_path),
        Some(base_summary.records_path.as_path()),
        3,
        &report_dir,
    )
    .unwrap();

    let report_csv = std::fs::read_to_string(&report.report_csv).unwrap();
    assert!(
        report_csv.starts_with("checkpoint,task_a,task_b\n"),
        "{report_csv}"
    );
    assert!(
        report_csv.contains("finetuned-model,100.00%,0.00%"),
        "{report_csv}"
    );
    assert!(
        report_csv.contains("base-model,100.00%,100.00%"),
        "{report_csv}"
    );

    // Top-3 on task B concentrates on the scripted task-A label.
    let topk_csv = std::fs::read_to_string(&report.topk_csv).unwrap();
    let task_b_rows: Vec<&str> = topk_csv
        .lines()
        .filter(|line| line.starts_with("finetuned-model,task_b"))
        .collect();
    assert_eq!(task_b_rows.len(), task_b_labels.len(), "{topk_csv}");
    for row in &task_b_rows {
        assert!(
            row.contains("cat"),
            "top prediction should name the A label: {row}"
        );
        assert!(row.ends_with("100.00%"), "{row}");
    }

    // Positive total forgetting gap, computed as the per-dataset sum.
    let gaps_csv = std::fs::read_to_string(report.gaps_csv.as_ref().unwrap()).unwrap();
    assert!(
        gaps_csv.contains("finetuned-model,task_a,0.00"),
        "{gaps_csv}"
    );
    assert!(
        gaps_csv.contains("finetuned-model,task_b,100.00"),
        "{gaps_csv}"
    );
    assert!(
        gaps_csv.contains("finetuned-model,TOTAL,100.00"),
        "{gaps_csv}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0);
    println!("[acceptance 8] PASS end-to-end signature: A 100.00%, B 0.00%, total gap +100.00 ({elapsed:?})");
}

#[test]
fn criterion_09_metrics_arithmetic() {
    let started = Instant::now();
    // 66 records for one truth label: 41 dog, 16 deer, 4 bird, 3 cat,
    // 2 unmatched free-form outputs.
    let mut records = Vec::new();
    let push = |prediction: Option<&str>, count: usize, records: &mut Vec<RunRecord>| {
        for _ in 0..count {
            let n = records.len();
            records.push(RunRecord {
                schema_version: 1,
                id: format!("mini:{n}"),
                dataset: "mini".into(),
                model: "m".into(),
                truth: "African_hunting_dog".into(),
                prompt_digest: "d".into(),
                output: match prediction {
                    Some(p) => format!("The object is a(n) {p}."),
                    None => "The object is an airplane".into(),
                },
                strategy: "rule".into(),
                verdict: Verdict::Incorrect,
                matched: prediction.map(|p| vec![p.to_string()]).unwrap_or_default(),
                judge_text: None,
                embed_label: None,
                embed_distance: None,
                started_ms: 0,
                finished_ms: 0,
            });
        }
    };
    push(Some("dog"), 41, &mut records);
    push(Some("deer"), 16, &mut records);
    push(Some("bird"), 4, &mut records);
    push(Some("cat"), 3, &mut records);
    push(None, 2, &mut records);
    assert_eq!(records.len(), 66);
    let dist = top_k_distribution(&records, 3).unwrap();
    let top = &dist.per_truth["African hunting dog"];
    assert_eq!(
        top,
        &vec![
            ("dog".to_string(), 6212),
            ("deer".to_string(), 2424),
            ("bird".to_string(), 606),
        ],
        "expected 62.12 / 24.24 / 6.06"
    );
    assert_eq!(format_percent(5696, 10000), "56.96%");
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0);
    println!("[acceptance 9] PASS top-3 62.12/24.24/6.06 and 56.96% cell format ({elapsed:?})");
}

#[test]
fn criterion_10_resume_and_parallelism_bounds() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let labels = ["airplane", "automobile", "bird", "cat"];
    let manifest = write_text_image_manifest(dir.path(), "task", &labels, 4);

    // Interrupted run: the mock serves six requests then fails.
    let failing_server = start_mock(
        r#"[{"match": {}, "reply": "The object is a(n) {image_text}.",
             "status_sequence": [200, 200, 200, 200, 200, 200, 500]}]"#,
    );
    let mut interrupted = mock_run_config(
        vec![manifest.clone()],
        &failing_server,
        "model-x",
        dir.path().join("resumed_out"),
    );
    interrupted.endpoint.parallelism = 1;
    interrupted.endpoint.max_retries = 0;
    let error = cmd_eval(&interrupted).unwrap_err();
    assert!(error.to_string().contains("partial records"), "{error:#}");
    let partial = std::fs::read_to_string(dir.path().join("resumed_out/records.jsonl")).unwrap();
    let partial_count = partial.lines().count();
    assert!((1..16).contains(&partial_count), "{partial_count}");
    drop(failing_server);

    // Resume against a healthy server; completed items come from cache.
    let healthy = start_mock(PERFECT_CLASSIFIER_SCRIPT);
    let mut resumed = mock_run_config(
        vec![manifest.clone()],
        &healthy,
        "model-x",
        dir.path().join("resumed_out"),
    );
    resumed.endpoint.parallelism = 1;
    resumed.resume = true;
    let resumed_summary = cmd_eval(&resumed).unwrap();
    assert_eq!(resumed_summary.total_records, 16);
    assert_eq!(
        healthy.request_count(),
        16 - partial_count,
        "resume must only query the unprocessed items"
    );

    // Uninterrupted reference run in a fresh directory.
    let reference_server = start_mock(PERFECT_CLASSIFIER_SCRIPT);
    let reference = mock_run_config(
        vec![manifest.clone()],
        &reference_server,
        "model-x",
        dir.path().join("fresh_out"),
    );
    let reference_summary = cmd_eval(&reference).unwrap();
    let resumed_report = std::fs::read_to_string(&resumed_summary.report_path).unwrap();
    let reference_report = std::fs::read_to_string(&reference_summary.report_path).unwrap();
    assert_eq!(
        resumed_report, reference_report,
        "resumed report must be byte-identical to the uninterrupted run"
    );

    // Parallelism bound, observed by the mock's in-flight counter.
    let slow_server = start_mock(
        r#"[{"match": {}, "reply": "The object is a(n) {image_text}.", "delay_ms": 20}]"#,
    );
    let mut bounded = mock_run_config(
        vec![manifest],
        &slow_server,
        "model-x",
        dir.path().join("bounded_out"),
    );
    bounded.endpoint.parallelism = 3;
    cmd_eval(&bounded).unwrap();
    assert_eq!(slow_server.request_count(), 16);
    assert!(
        slow_server.peak_in_flight() <= 3,
        "peak in-flight {} exceeded parallelism 3",
        slow_server.peak_in_flight()
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0);
    println!(
        "[acceptance 10] PASS resume byte-identical; peak in-flight {} <= 3 ({elapsed:?})",
        slow_server.peak_in_flight()
    );
}

//! Shared fixtures for the pipeline and acceptance tests: tiny manifests
//! whose "images" are text files naming their class, plus mock scripts.

use forgetbench::client::{mock_serve, EndpointConfig, MockScript, MockServer};
use forgetbench_cli::{RunConfig, StrategyKind};
use std::path::{Path, PathBuf};

/// Write a manifest whose items are text files containing the display label.
/// Returns the manifest path. Labels get `per_class` items each.
pub fn write_text_image_manifest(
    dir: &Path,
    name: &str,
    labels: &[&str],
    per_class: usize,
) -> PathBuf {
    let images_dir = dir.join(format!("{name}_images"));
    std::fs::create_dir_all(&images_dir).unwrap();
    let mut items = Vec::new();
    for (class, label) in labels.iter().enumerate() {
        for i in 0..per_class {
            let file = format!("{name}_images/{label}_{i}.txt");
            // Whitespace padding keeps every item's bytes unique (distinct
            // cache keys, like real images) while {image_text} still trims
            // to the display label.
            let content = format!("{}\n{}", label.replace('_', " "), " ".repeat(i));
            std::fs::write(dir.join(&file), content).unwrap();
            items.push(serde_json::json!({"image": file, "label": class}));
        }
    }
    let manifest = serde_json::json!({
        "name": name,
        "kind": "object",
        "labels": labels,
        "items": items,
    });
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

pub fn start_mock(script_json: &str) -> MockServer {
    let script: MockScript = serde_json::from_str(script_json).expect("valid script");
    mock_serve(&script, 0).expect("mock starts")
}

/// Run config pointing at a mock server, rule grading, fast retries.
pub fn mock_run_config(
    manifests: Vec<PathBuf>,
    server: &MockServer,
    model_name: &str,
    out_dir: PathBuf,
) -> RunConfig {
    RunConfig {
        manifests,
        endpoint: EndpointConfig {
            retry_backoff_ms: 1,
            timeout_secs: 10.0,
            ..EndpointConfig::new(server.base_url(), model_name)
        },
        strategy: StrategyKind::Rule,
        out_dir,
        ..RunConfig::default()
    }
}

/// Script: answer every prompt by echoing the image text as a label.
pub const PERFECT_CLASSIFIER_SCRIPT: &str =
    r#"[{"match": {}, "reply": "The object is a(n) {image_text}."}]"#;

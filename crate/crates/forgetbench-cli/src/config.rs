//! Run configuration: a versioned JSON document naming the datasets, the
//! endpoint(s), the grading strategy, and the output location. Relative
//! paths inside the file resolve against the file's own directory.

use anyhow::{bail, Context, Result};
use forgetbench::client::EndpointConfig;
use forgetbench::prompts::JudgeParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Rule,
    Embed,
    Judge,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Rule => "rule",
            StrategyKind::Embed => "embed",
            StrategyKind::Judge => "judge",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "rule" => Ok(StrategyKind::Rule),
            "embed" => Ok(StrategyKind::Embed),
            "judge" => Ok(StrategyKind::Judge),
            other => bail!("unknown strategy {other:?} (expected rule, embed, or judge)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub manifests: Vec<PathBuf>,
    pub endpoint: EndpointConfig,
    pub strategy: StrategyKind,
    /// Judge endpoint; falls back to `endpoint` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_endpoint: Option<EndpointConfig>,
    pub judge_params: JudgeParams,
    /// Sampling parameters for classification queries; falls back to
    /// `judge_params` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling: Option<JudgeParams>,
    /// Embedding endpoint for the embed strategy; falls back to `endpoint`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_endpoint: Option<EndpointConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_table: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alias_file: Option<PathBuf>,
    /// Optional system message prepended to classification queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_message: Option<String>,
    pub eval_fraction: f64,
    pub eval_seed: u64,
    pub stratified: bool,
    pub out_dir: PathBuf,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            manifests: Vec::new(),
            endpoint: EndpointConfig::new("http://127.0.0.1:8080", "model"),
            strategy: StrategyKind::Rule,
            judge_endpoint: None,
            judge_params: JudgeParams::default(),
            sampling: None,
            embed_endpoint: None,
            embed_table: None,
            alias_file: None,
            system_message: None,
            eval_fraction: 1.0,
            eval_seed: 0,
            stratified: false,
            out_dir: PathBuf::from("out"),
            resume: false,
        }
    }
}

impl RunConfig {
    /// Load from JSON and resolve relative paths against the file's parent
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("failed to read config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("malformed config {}", path.display()))?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "config {} has schema_version {}, this build understands {}",
                path.display(),
                config.schema_version,
                CONFIG_SCHEMA_VERSION
            );
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for manifest in &mut config.manifests {
            *manifest = resolve(base, manifest);
        }
        if let Some(p) = &mut config.embed_table {
            *p = resolve(base, p);
        }
        if let Some(p) = &mut config.alias_file {
            *p = resolve(base, p);
        }
        config.out_dir = resolve(base, &config.out_dir);
        Ok(config)
    }

    /// Classification sampling parameters (judge defaults unless
    /// overridden).
    pub fn sampling_params(&self) -> JudgeParams {
        self.sampling
            .clone()
            .unwrap_or_else(|| self.judge_params.clone())
    }

    pub fn judge_endpoint(&self) -> EndpointConfig {
        self.judge_endpoint
            .clone()
            .unwrap_or_else(|| self.endpoint.clone())
    }

    pub fn embed_endpoint(&self) -> EndpointConfig {
        self.embed_endpoint
            .clone()
            .unwrap_or_else(|| self.endpoint.clone())
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Command-line overrides applied on top of the loaded config. The
/// resulting effective config is what gets snapshotted into the run
/// directory.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub resume: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.eval_seed = seed;
        }
        if let Some(parallelism) = self.parallelism {
            config.endpoint.parallelism = parallelism;
            if let Some(judge) = &mut config.judge_endpoint {
                judge.parallelism = parallelism;
            }
        }
        if self.resume {
            config.resume = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let config: RunConfig = serde_json::from_str(
            r#"{"manifests": ["a.json"], "endpoint": {"base_url": "http://x", "model_name": "m"}}"#,
        )
        .unwrap();
        assert_eq!(config.schema_version, 1);
        assert_eq!(config.eval_fraction, 1.0);
        assert_eq!(config.strategy, StrategyKind::Rule);
        assert_eq!(config.judge_params.temperature, 0.2);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"manifests": ["data/a.json"], "out_dir": "results",
                "endpoint": {"base_url": "http://x", "model_name": "m"}}"#,
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.manifests[0], dir.path().join("data/a.json"));
        assert_eq!(config.out_dir, dir.path().join("results"));
    }

    #[test]
    fn unknown_schema_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"schema_version": 99, "endpoint": {"base_url": "http://x", "model_name": "m"}}"#,
        )
        .unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut config = RunConfig::default();
        Overrides {
            out: Some(PathBuf::from("/tmp/o")),
            seed: Some(9),
            parallelism: Some(2),
            resume: true,
        }
        .apply(&mut config);
        assert_eq!(config.out_dir, PathBuf::from("/tmp/o"));
        assert_eq!(config.eval_seed, 9);
        assert_eq!(config.endpoint.parallelism, 2);
        assert!(config.resume);
    }
}

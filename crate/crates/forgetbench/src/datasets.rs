//! Classification task definitions: ordered label sets, dataset manifests,
//! class splits, evaluation subsampling, and synthetic Gaussian-cluster data
//! for the collapse lab.
//!
//! A manifest never touches pixels. Image references are opaque strings that
//! the caller resolves to bytes; this keeps the harness model-agnostic.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Seed for the class-mean directions of synthetic data. Fixed so that means
/// depend only on (K, p) and not on the sampling seed.
const DIRECTION_SEED: u64 = 0x5eed_d1f5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("label set is empty")]
    EmptyLabels,
    #[error(
        "duplicate label {label:?} (labels must be unique ignoring case and underscore/space)"
    )]
    DuplicateLabel { label: String },
    #[error("kind is \"digit\" but label {label:?} is not a base-10 integer")]
    NonDigitLabel { label: String },
    #[error(
        "item {index} (image {image:?}): class index {class_index} is out of range for {k} labels"
    )]
    ClassIndexOutOfRange {
        index: usize,
        image: String,
        class_index: usize,
        k: usize,
    },
    #[error("split fraction {fraction} leaves the first class group empty")]
    EmptySplit { fraction: f64 },
    #[error("sample fraction {fraction} rounds to zero items")]
    EmptySample { fraction: f64 },
    #[error("manifest has no items")]
    EmptyManifest,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Ordered list of class labels. Order is stable and defines the class
/// indices `0..K-1` used everywhere else.
///
/// Labels are stored in canonical form (underscores, e.g.
/// `African_hunting_dog`); the display form used in prompts replaces
/// underscores with spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::EmptyLabels);
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            let folded = label.to_lowercase().replace('_', " ");
            if folded.trim().is_empty() {
                return Err(DatasetError::DuplicateLabel {
                    label: label.clone(),
                });
            }
            if !seen.insert(folded) {
                return Err(DatasetError::DuplicateLabel {
                    label: label.clone(),
                });
            }
        }
        Ok(Self { labels })
    }

    /// Number of classes `K`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Canonical (underscored) label for a class index.
    pub fn canonical(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Display form: underscores replaced by spaces.
    pub fn display(&self, index: usize) -> String {
        self.labels[index].replace('_', " ")
    }

    pub fn display_labels(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.display(i)).collect()
    }

    pub fn canonical_labels(&self) -> &[String] {
        &self.labels
    }

    /// Index of a label, comparing case-insensitively and treating
    /// underscores and spaces as equivalent.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let needle = label.to_lowercase().replace('_', " ");
        self.labels
            .iter()
            .position(|l| l.to_lowercase().replace('_', " ") == needle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Digit,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Opaque image reference (path or URI); never decoded by the harness.
    pub image: String,
    /// Class index into the manifest's label set.
    pub label: usize,
}

/// A classification task: named label set plus image references.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub kind: DatasetKind,
    pub labels: LabelSet,
    pub items: Vec<ManifestItem>,
    /// Optional provenance tag ("train"/"test"/...); carried through, no
    /// policy attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl DatasetManifest {
    pub fn new(
        name: String,
        kind: DatasetKind,
        labels: LabelSet,
        items: Vec<ManifestItem>,
    ) -> Result<Self, DatasetError> {
        let manifest = Self {
            name,
            kind,
            labels,
            items,
            split: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.labels.is_empty() {
            return Err(DatasetError::EmptyLabels);
        }
        if self.kind == DatasetKind::Digit {
            for label in self.labels.canonical_labels() {
                if label.parse::<i64>().is_err() {
                    return Err(DatasetError::NonDigitLabel {
                        label: label.clone(),
                    });
                }
            }
        }
        let k = self.labels.len();
        for (index, item) in self.items.iter().enumerate() {
            if item.label >= k {
                return Err(DatasetError::ClassIndexOutOfRange {
                    index,
                    image: item.image.clone(),
                    class_index: item.label,
                    k,
                });
            }
        }
        Ok(())
    }
}

/// Load and validate a manifest file (UTF-8 JSON).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| DatasetError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    // serde already enforced shape; re-run semantic checks (duplicates,
    // ranges) so errors name the offender.
    LabelSet::new(manifest.labels.canonical_labels().to_vec())?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Disjoint class-index groups for a two-phase forgetting run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub pretrain_classes: Vec<usize>,
    pub finetune_classes: Vec<usize>,
}

impl ClassSplit {
    /// Split `k` classes by label order: the first `floor(fraction * k)`
    /// indices form the first group, the rest the second. `fraction` must
    /// lie in (0, 1].
    pub fn by_fraction(k: usize, fraction: f64) -> Result<Self, DatasetError> {
        if fraction.is_nan() || fraction <= 0.0 || fraction > 1.0 {
            return Err(DatasetError::EmptySplit { fraction });
        }
        let cut = (fraction * k as f64).floor() as usize;
        if cut == 0 {
            return Err(DatasetError::EmptySplit { fraction });
        }
        let cut = cut.min(k);
        Ok(Self {
            pretrain_classes: (0..cut).collect(),
            finetune_classes: (cut..k).collect(),
        })
    }
}

/// Split a manifest's classes by label order. `fraction` is the share of
/// classes in the first (pretraining) group.
pub fn split_by_class(
    manifest: &DatasetManifest,
    fraction: f64,
) -> Result<ClassSplit, DatasetError> {
    ClassSplit::by_fraction(manifest.labels.len(), fraction)
}

/// Deterministically subsample a manifest for evaluation.
///
/// Pure in `(manifest, fraction, seed, stratified)`: the PRNG is ChaCha12
/// seeded with `seed`, and the selected items keep their original order.
/// Stratified sampling draws `round(fraction * n_c)` items per class;
/// otherwise `round(fraction * N)` items are drawn without replacement.
pub fn sample_eval_subset(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<DatasetManifest, DatasetError> {
    if manifest.items.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    if fraction.is_nan() || fraction <= 0.0 || fraction > 1.0 {
        return Err(DatasetError::EmptySample { fraction });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut selected: Vec<usize> = Vec::new();
    if stratified {
        let k = manifest.labels.len();
        for class in 0..k {
            let class_items: Vec<usize> = manifest
                .items
                .iter()
                .enumerate()
                .filter(|(_, it)| it.label == class)
                .map(|(i, _)| i)
                .collect();
            let take = (fraction * class_items.len() as f64).round() as usize;
            selected.extend(choose_without_replacement(&class_items, take, &mut rng));
        }
    } else {
        let all: Vec<usize> = (0..manifest.items.len()).collect();
        let take = (fraction * all.len() as f64).round() as usize;
        selected = choose_without_replacement(&all, take, &mut rng);
    }
    if selected.is_empty() {
        return Err(DatasetError::EmptySample { fraction });
    }
    selected.sort_unstable();
    Ok(DatasetManifest {
        name: manifest.name.clone(),
        kind: manifest.kind,
        labels: manifest.labels.clone(),
        items: selected
            .into_iter()
            .map(|i| manifest.items[i].clone())
            .collect(),
        split: manifest.split.clone(),
    })
}

/// Partial Fisher-Yates draw of `take` indices from `pool`.
fn choose_without_replacement(pool: &[usize], take: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    let take = take.min(pool.len());
    for i in 0..take {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Parameters for synthetic Gaussian-cluster data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Class count K.
    pub k: usize,
    /// Feature dimension p.
    pub p: usize,
    /// Samples per class.
    pub per_class_n: usize,
    /// Distance of each class mean from the origin.
    pub cluster_separation: f64,
    /// Isotropic noise standard deviation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.k < 2 {
            return Err(DatasetError::InvalidSpec("k must be at least 2".into()));
        }
        if self.p < 1 {
            return Err(DatasetError::InvalidSpec("p must be at least 1".into()));
        }
        if self.per_class_n < 1 {
            return Err(DatasetError::InvalidSpec(
                "per_class_n must be at least 1".into(),
            ));
        }
        if self.cluster_separation.is_nan() || self.cluster_separation <= 0.0 {
            return Err(DatasetError::InvalidSpec(
                "cluster_separation must be positive".into(),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(DatasetError::InvalidSpec(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Class-mean directions: unit rows drawn from a fixed-seed PRNG so they
/// depend only on (K, p). Errors if two directions coincide (possible only
/// in degenerate dimensions, e.g. p = 1 with K > 2).
pub fn class_mean_directions(k: usize, p: usize) -> Result<Array2<f64>, DatasetError> {
    let mut rng = ChaCha12Rng::seed_from_u64(DIRECTION_SEED);
    let mut dirs = Array2::<f64>::zeros((k, p));
    for mut row in dirs.rows_mut() {
        let mut norm = 0.0;
        while norm == 0.0 {
            for v in row.iter_mut() {
                *v = standard_normal(&mut rng);
            }
            norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        row.mapv_inplace(|v| v / norm);
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let dot: f64 = (0..p).map(|j| dirs[[a, j]] * dirs[[b, j]]).sum();
            if dot > 1.0 - 1e-9 {
                return Err(DatasetError::InvalidSpec(format!(
                    "p = {p} is too small for {k} pairwise-distinct unit directions"
                )));
            }
        }
    }
    Ok(dirs)
}

/// Generate K Gaussian clusters: class k is centered at
/// `cluster_separation * u_k` with isotropic `noise_sigma` noise.
/// Deterministic given a `SyntheticSpec`; changing `seed` changes the samples but
/// not the class means.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Array2<f64>, Vec<usize>), DatasetError> {
    spec.validate()?;
    let dirs = class_mean_directions(spec.k, spec.p)?;
    let n_total = spec.k * spec.per_class_n;
    let mut features = Array2::<f64>::zeros((n_total, spec.p));
    let mut labels = Vec::with_capacity(n_total);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut row = 0;
    for class in 0..spec.k {
        for _ in 0..spec.per_class_n {
            for j in 0..spec.p {
                let noise = if spec.noise_sigma > 0.0 {
                    spec.noise_sigma * standard_normal(&mut rng)
                } else {
                    0.0
                };
                features[[row, j]] = spec.cluster_separation * dirs[[class, j]] + noise;
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok((features, labels))
}

/// Box-Muller standard normal. Kept local so synthetic data does not depend
/// on rand_distr version changes.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Write synthetic data as CSV: p feature columns `f0..f{p-1}` plus a
/// `label` column.
pub fn write_synthetic_csv<W: Write>(
    features: &Array2<f64>,
    labels: &[usize],
    writer: W,
) -> Result<(), DatasetError> {
    let p = features.ncols();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..p).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let io_err = |e: csv::Error| DatasetError::InvalidSpec(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(io_err)?;
    for (i, label) in labels.iter().enumerate() {
        let mut record: Vec<String> = (0..p).map(|j| format!("{}", features[[i, j]])).collect();
        record.push(label.to_string());
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| DatasetError::InvalidSpec(format!("csv flush failed: {e}")))?;
    Ok(())
}

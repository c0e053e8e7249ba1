//! Grading of raw model output against the ground-truth label.
//!
//! Three strategies are supported: hard-coded label matching
//! ([`rule_match`]), nearest text embedding ([`embed_match`]), and a yes/no
//! judge model ([`judge_parse`] over the judge's reply). [`classify_verdict`]
//! combines rule matches and the judge answer into the five-way [`Verdict`].

use crate::datasets::LabelSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("embedding dimension mismatch: query has {query}, table has {table}")]
    DimensionMismatch { query: usize, table: usize },
    #[error("embedding table: {0}")]
    InvalidTable(String),
    #[error("judge reply is not a yes/no answer: {raw:?}")]
    UnparseableJudge { raw: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("alias {alias:?} maps to {target:?} which is not in the label set")]
    UnknownAliasTarget { alias: String, target: String },
}

/// Five-way grading outcome.
///
/// `Unparseable` is reserved for empty/undecodable outputs and judge replies
/// that could not be parsed; it is never a semantic judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    IntrinsicHallucination,
    ExtrinsicHallucination,
    Unparseable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Correct => "correct",
            Verdict::Incorrect => "incorrect",
            Verdict::IntrinsicHallucination => "intrinsic_hallucination",
            Verdict::ExtrinsicHallucination => "extrinsic_hallucination",
            Verdict::Unparseable => "unparseable",
        }
    }
}

/// Labels found in an output, each reported once at its first occurrence,
/// ordered by byte offset into the normalized output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (canonical label, byte offset in `normalized_output`).
    pub matched_labels: Vec<(String, usize)>,
    pub normalized_output: String,
}

impl MatchResult {
    pub fn matched_canonical(&self) -> Vec<String> {
        self.matched_labels.iter().map(|(l, _)| l.clone()).collect()
    }
}

/// Optional synonym map: alias (any case, underscores or spaces) to a
/// canonical label. Off unless explicitly loaded and passed in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasMap {
    aliases: BTreeMap<String, String>,
}

impl AliasMap {
    pub fn load(path: &Path) -> Result<Self, PostprocError> {
        let text = std::fs::read_to_string(path).map_err(|source| PostprocError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| PostprocError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.aliases.iter()
    }
}

/// Normalize text for matching: case-fold, underscores to spaces,
/// punctuation to spaces, whitespace collapsed.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.to_lowercase().chars() {
        let mapped = if c == '_' {
            ' '
        } else if c.is_alphanumeric() {
            c
        } else {
            ' '
        };
        if mapped == ' ' {
            if !last_space {
                out.push(' ');
                last_space = true;
            }
        } else {
            out.push(mapped);
            last_space = false;
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Search the output for display-form label names as whole-word sequences.
///
/// Longer labels are matched before their substrings, so when both
/// `aquarium fish` and `fish` are labels, an occurrence of "aquarium fish"
/// is not also reported as "fish". An empty output yields no matches.
pub fn rule_match(output: &str, label_set: &LabelSet) -> MatchResult {
    rule_match_aliased(output, label_set, &AliasMap::default())
        .expect("empty alias map cannot fail")
}

/// [`rule_match`] with synonym support: alias terms are searched like labels
/// and reported as their canonical target.
pub fn rule_match_aliased(
    output: &str,
    label_set: &LabelSet,
    aliases: &AliasMap,
) -> Result<MatchResult, PostprocError> {
    let normalized = normalize_text(output);
    let words: Vec<&str> = if normalized.is_empty() {
        Vec::new()
    } else {
        normalized.split(' ').collect()
    };
    // Byte offset of each word in the normalized output.
    let mut offsets = Vec::with_capacity(words.len());
    let mut pos = 0;
    for w in &words {
        offsets.push(pos);
        pos += w.len() + 1;
    }

    // Search terms: every label plus every alias, mapped back to the
    // canonical label they stand for.
    struct Term {
        words: Vec<String>,
        canonical: String,
        class_index: usize,
    }
    let mut terms = Vec::new();
    for index in 0..label_set.len() {
        let display = label_set.display(index);
        terms.push(Term {
            words: normalize_text(&display)
                .split(' ')
                .map(str::to_string)
                .collect(),
            canonical: label_set.canonical(index).to_string(),
            class_index: index,
        });
    }
    for (alias, target) in aliases.iter() {
        let index =
            label_set
                .index_of(target)
                .ok_or_else(|| PostprocError::UnknownAliasTarget {
                    alias: alias.clone(),
                    target: target.clone(),
                })?;
        terms.push(Term {
            words: normalize_text(alias)
                .split(' ')
                .map(str::to_string)
                .collect(),
            canonical: label_set.canonical(index).to_string(),
            class_index: index,
        });
    }
    // Longest terms claim their word spans first.
    terms.sort_by(|a, b| {
        b.words
            .len()
            .cmp(&a.words.len())
            .then_with(|| {
                b.words
                    .iter()
                    .map(String::len)
                    .sum::<usize>()
                    .cmp(&a.words.iter().map(String::len).sum::<usize>())
            })
            .then_with(|| a.class_index.cmp(&b.class_index))
    });

    let mut claimed = vec![false; words.len()];
    let mut matched: BTreeMap<String, usize> = BTreeMap::new();
    for term in &terms {
        if term.words.is_empty() || term.words.iter().any(String::is_empty) {
            continue;
        }
        let n = term.words.len();
        if n > words.len() {
            continue;
        }
        for start in 0..=(words.len() - n) {
            if claimed[start..start + n].iter().any(|&c| c) {
                continue;
            }
            if (0..n).all(|i| words[start + i] == term.words[i]) {
                // First unclaimed occurrence wins; a label already matched
                // (directly or via an alias) is not reported twice.
                if !matched.contains_key(&term.canonical) {
                    matched.insert(term.canonical.clone(), offsets[start]);
                    claimed[start..start + n].iter_mut().for_each(|c| *c = true);
                }
                break;
            }
        }
    }

    let mut matched_labels: Vec<(String, usize)> = matched.into_iter().collect();
    matched_labels.sort_by_key(|&(_, offset)| offset);
    Ok(MatchResult {
        matched_labels,
        normalized_output: normalized,
    })
}

/// One label vector per class, all of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub labels: LabelSet,
    pub vectors: Vec<Vec<f64>>,
    pub normalized: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingEntry {
    label: String,
    vector: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingTableWire {
    dim: usize,
    normalized: bool,
    entries: Vec<EmbeddingEntry>,
}

impl EmbeddingTable {
    pub fn new(
        labels: LabelSet,
        vectors: Vec<Vec<f64>>,
        normalized: bool,
    ) -> Result<Self, PostprocError> {
        if vectors.len() != labels.len() {
            return Err(PostprocError::InvalidTable(format!(
                "{} vectors for {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(PostprocError::InvalidTable(format!(
                    "entry {i} has dimension {} (expected {dim})",
                    v.len()
                )));
            }
            if normalized {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(PostprocError::InvalidTable(format!(
                        "entry {i} has norm {norm} but the table claims unit vectors"
                    )));
                }
            }
        }
        Ok(Self {
            labels,
            vectors,
            normalized,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }

    pub fn load(path: &Path) -> Result<Self, PostprocError> {
        let text = std::fs::read_to_string(path).map_err(|source| PostprocError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let wire: EmbeddingTableWire =
            serde_json::from_str(&text).map_err(|source| PostprocError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let labels = LabelSet::new(wire.entries.iter().map(|e| e.label.clone()).collect())
            .map_err(|e| PostprocError::InvalidTable(e.to_string()))?;
        let vectors: Vec<Vec<f64>> = wire.entries.into_iter().map(|e| e.vector).collect();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != wire.dim {
                return Err(PostprocError::InvalidTable(format!(
                    "entry {i} has dimension {} but the header says {}",
                    v.len(),
                    wire.dim
                )));
            }
        }
        Self::new(labels, vectors, wire.normalized)
    }

    pub fn save(&self, path: &Path) -> Result<(), PostprocError> {
        let wire = EmbeddingTableWire {
            dim: self.dim(),
            normalized: self.normalized,
            entries: (0..self.labels.len())
                .map(|i| EmbeddingEntry {
                    label: self.labels.canonical(i).to_string(),
                    vector: self.vectors[i].clone(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&wire).expect("table serializes");
        std::fs::write(path, text).map_err(|source| PostprocError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Nearest label by Euclidean distance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedMatch {
    pub class_index: usize,
    pub label: String,
    pub distance: f64,
}

/// Return the label whose vector minimizes the Euclidean distance to the
/// query. Ties break toward the lowest class index.
pub fn embed_match(query: &[f64], table: &EmbeddingTable) -> Result<EmbedMatch, PostprocError> {
    if query.len() != table.dim() {
        return Err(PostprocError::DimensionMismatch {
            query: query.len(),
            table: table.dim(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (index, vector) in table.vectors.iter().enumerate() {
        let dist_sq: f64 = query
            .iter()
            .zip(vector)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // Strict less-than keeps the earliest index on ties.
        if best.is_none_or(|(_, d)| dist_sq < d) {
            best = Some((index, dist_sq));
        }
    }
    let (class_index, dist_sq) = best.expect("table is non-empty");
    Ok(EmbedMatch {
        class_index,
        label: table.labels.canonical(class_index).to_string(),
        distance: dist_sq.sqrt(),
    })
}

/// Parse a judge reply into yes/no.
///
/// The leading alphabetic token (ignoring punctuation and whitespace)
/// decides, case-insensitively. Anything else is an error carrying the raw
/// reply so the query can be re-judged.
pub fn judge_parse(judge_text: &str) -> Result<bool, PostprocError> {
    let token: String = judge_text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .flat_map(|c| c.to_lowercase())
        .collect();
    match token.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(PostprocError::UnparseableJudge {
            raw: judge_text.to_string(),
        }),
    }
}

/// Combine rule matches and (optionally) the judge's answer into a verdict.
///
/// Decision order, first hit wins; the judge is authoritative for
/// correctness when present:
///
/// 1. empty output → `Unparseable`
/// 2. judge says yes — or, with no judge, the unique match equals the
///    truth → `Correct`
/// 3. two or more distinct labels matched → `IntrinsicHallucination`
///    (a single label was demanded)
/// 4. exactly one label matched and it is not the truth → `Incorrect`
/// 5. otherwise (nothing matched, or the truth matched but the judge said
///    no) → `ExtrinsicHallucination`
pub fn classify_verdict(
    truth: &str,
    output: &str,
    matches: &MatchResult,
    judge: Option<bool>,
) -> Verdict {
    if output.trim().is_empty() {
        return Verdict::Unparseable;
    }
    let matched = &matches.matched_labels;
    let unique_is_truth = matched.len() == 1 && labels_equal(&matched[0].0, truth);
    match judge {
        Some(true) => return Verdict::Correct,
        Some(false) => {}
        None => {
            if unique_is_truth {
                return Verdict::Correct;
            }
        }
    }
    if matched.len() >= 2 {
        return Verdict::IntrinsicHallucination;
    }
    if matched.len() == 1 && !labels_equal(&matched[0].0, truth) {
        return Verdict::Incorrect;
    }
    Verdict::ExtrinsicHallucination
}

fn labels_equal(a: &str, b: &str) -> bool {
    a.to_lowercase().replace('_', " ") == b.to_lowercase().replace('_', " ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(names: &[&str]) -> LabelSet {
        LabelSet::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn mnist() -> LabelSet {
        LabelSet::new((0..10).map(|d| d.to_string()).collect()).unwrap()
    }

    fn cifar10() -> LabelSet {
        labels(&[
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
        ])
    }

    #[test]
    fn digit_output_matches_single_label() {
        let m = rule_match("The number in the image is 8", &mnist());
        assert_eq!(m.matched_canonical(), vec!["8"]);
    }

    #[test]
    fn multi_label_output_matches_eight() {
        let m = rule_match(
            "airplane, automobile, bird, cat, deer, dog, frog, horse,",
            &cifar10(),
        );
        assert_eq!(m.matched_labels.len(), 8);
        let offsets: Vec<usize> = m.matched_labels.iter().map(|&(_, o)| o).collect();
        assert!(offsets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_output_matches_nothing() {
        let m = rule_match("", &cifar10());
        assert!(m.matched_labels.is_empty());
    }

    #[test]
    fn longer_label_shadows_substring() {
        let set = labels(&["aquarium_fish", "fish"]);
        let m = rule_match("an aquarium fish in a tank", &set);
        assert_eq!(m.matched_canonical(), vec!["aquarium_fish"]);
        // A separate standalone occurrence still matches.
        let m = rule_match("the aquarium fish looked like a fish", &set);
        assert_eq!(m.matched_canonical(), vec!["aquarium_fish", "fish"]);
    }

    #[test]
    fn match_requires_whole_words() {
        let set = labels(&["cat"]);
        let m = rule_match("the category is unknown", &set);
        assert!(m.matched_labels.is_empty());
        let m = rule_match("a CAT!", &set);
        assert_eq!(m.matched_canonical(), vec!["cat"]);
    }

    #[test]
    fn label_reported_once_at_first_occurrence() {
        let set = labels(&["dog"]);
        let m = rule_match("dog dog dog", &set);
        assert_eq!(m.matched_labels, vec![("dog".to_string(), 0)]);
    }

    #[test]
    fn alias_maps_to_canonical() {
        let set = labels(&["African_hunting_dog", "cat"]);
        let aliases: AliasMap =
            serde_json::from_str(r#"{"painted wolf": "African_hunting_dog"}"#).unwrap();
        let m = rule_match_aliased("a painted wolf runs", &set, &aliases).unwrap();
        assert_eq!(m.matched_canonical(), vec!["African_hunting_dog"]);
        let bad: AliasMap = serde_json::from_str(r#"{"x": "unknown"}"#).unwrap();
        assert!(rule_match_aliased("x", &set, &bad).is_err());
    }

    #[test]
    fn embed_exact_hit() {
        let table = EmbeddingTable::new(
            labels(&["a", "b", "c"]),
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            true,
        )
        .unwrap();
        let m = embed_match(&[0.0, 1.0, 0.0], &table).unwrap();
        assert_eq!(m.class_index, 1);
        assert_eq!(m.distance, 0.0);
    }

    #[test]
    fn embed_tie_breaks_to_lowest_index() {
        let table = EmbeddingTable::new(
            labels(&["a", "b"]),
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            true,
        )
        .unwrap();
        let m = embed_match(&[0.0, 0.5], &table).unwrap();
        assert_eq!(m.class_index, 0);
    }

    #[test]
    fn embed_dimension_mismatch() {
        let table = EmbeddingTable::new(labels(&["a"]), vec![vec![1.0, 0.0]], false).unwrap();
        assert!(matches!(
            embed_match(&[1.0], &table),
            Err(PostprocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn judge_parse_cases() {
        assert!(judge_parse("Yes.").unwrap());
        assert!(!judge_parse("no, the prediction is wrong").unwrap());
        assert!(judge_parse("  \"YES\"!").unwrap());
        assert!(matches!(
            judge_parse("maybe"),
            Err(PostprocError::UnparseableJudge { .. })
        ));
    }

    #[test]
    fn verdict_free_form_description_is_extrinsic() {
        // Output mentions no full label; the judge rejects it.
        let set = labels(&["aquarium_fish", "bowl"]);
        let m = rule_match("a picture of a fish in a tank", &set);
        assert!(m.matched_labels.is_empty());
        let v = classify_verdict(
            "aquarium_fish",
            "a picture of a fish in a tank",
            &m,
            Some(false),
        );
        assert_eq!(v, Verdict::ExtrinsicHallucination);
    }

    #[test]
    fn verdict_many_labels_is_intrinsic() {
        let out = "airplane, automobile, bird, cat, deer, dog, frog, horse,";
        let m = rule_match(out, &cifar10());
        let v = classify_verdict("horse", out, &m, Some(false));
        assert_eq!(v, Verdict::IntrinsicHallucination);
    }

    #[test]
    fn verdict_truth_present_but_rejected_is_extrinsic() {
        let out = "The airplane is 8.";
        let m = rule_match(out, &cifar10());
        assert_eq!(m.matched_canonical(), vec!["airplane"]);
        let v = classify_verdict("airplane", out, &m, Some(false));
        assert_eq!(v, Verdict::ExtrinsicHallucination);
    }

    #[test]
    fn verdict_single_wrong_label_is_incorrect() {
        let out = "The number in the image is 8";
        let m = rule_match(out, &mnist());
        let v = classify_verdict("0", out, &m, Some(false));
        assert_eq!(v, Verdict::Incorrect);
    }

    #[test]
    fn verdict_empty_output_is_unparseable() {
        let m = rule_match("", &cifar10());
        assert_eq!(classify_verdict("cat", "", &m, None), Verdict::Unparseable);
        assert_eq!(
            classify_verdict("cat", "   ", &m, Some(true)),
            Verdict::Unparseable
        );
    }

    #[test]
    fn verdict_judge_yes_is_authoritative() {
        let out = "airplane and truck";
        let m = rule_match(out, &cifar10());
        assert_eq!(m.matched_labels.len(), 2);
        assert_eq!(
            classify_verdict("airplane", out, &m, Some(true)),
            Verdict::Correct
        );
    }

    #[test]
    fn verdict_rule_only_well_behaved_output_is_correct() {
        let out = "The object is a(n) cat.";
        let m = rule_match(out, &cifar10());
        assert_eq!(classify_verdict("cat", out, &m, None), Verdict::Correct);
    }

    proptest! {
        #[test]
        fn verdict_total_and_exhaustive(
            n_matched in 0usize..4,
            truth_matched: bool,
            judge in prop::option::of(any::<bool>()),
            empty: bool,
        ) {
            // Synthesize a MatchResult consistent with the flags and check
            // exactly one decision-table case fires.
            let mut matched = Vec::new();
            let mut names = vec!["alpha", "beta", "gamma", "delta"];
            if truth_matched && n_matched > 0 {
                matched.push(("truth".to_string(), 0));
                names.truncate(n_matched - 1);
            } else {
                names.truncate(n_matched);
            }
            for (i, n) in names.iter().enumerate() {
                matched.push((n.to_string(), (i + 1) * 10));
            }
            let m = MatchResult { matched_labels: matched, normalized_output: String::new() };
            let output = if empty { "" } else { "text" };
            let v = classify_verdict("truth", output, &m, judge);
            let no_judge_unique_truth = judge.is_none()
                && m.matched_labels.len() == 1
                && truth_matched
                && n_matched > 0;
            let expected = if empty {
                Verdict::Unparseable
            } else if judge == Some(true) || no_judge_unique_truth {
                Verdict::Correct
            } else if m.matched_labels.len() >= 2 {
                Verdict::IntrinsicHallucination
            } else if m.matched_labels.len() == 1
                && !(truth_matched && n_matched > 0)
            {
                Verdict::Incorrect
            } else {
                Verdict::ExtrinsicHallucination
            };
            prop_assert_eq!(v, expected);
        }

        #[test]
        fn rule_match_case_and_underscore_invariant(upper: bool, underscore: bool) {
            let set = labels(&["aquarium_fish", "dog"]);
            let mut text = "the aquarium fish chased a dog".to_string();
            if upper { text = text.to_uppercase(); }
            if underscore { text = text.replace(' ', "_"); }
            let m = rule_match(&text, &set);
            prop_assert_eq!(m.matched_canonical(), vec!["aquarium_fish".to_string(), "dog".to_string()]);
        }

        #[test]
        fn embed_match_agrees_with_exhaustive_scan(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let k = 8;
            let dim = 5;
            let vectors: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let table = EmbeddingTable::new(
                LabelSet::new((0..k).map(|i| format!("l{i}")).collect()).unwrap(),
                vectors.clone(),
                false,
            ).unwrap();
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = embed_match(&query, &table).unwrap();
            // Oracle: full scan, first minimum.
            let mut best = (f64::INFINITY, 0usize);
            for (i, v) in vectors.iter().enumerate() {
                let d: f64 = query.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            prop_assert_eq!(got.class_index, best.1);
        }
    }
}

//! Byte-exact prompt construction: classification prompts, judge prompts,
//! judge sampling parameters, and instruction-tuning records.
//!
//! All emitters are pure functions; given the same label set they produce
//! byte-identical text on every platform. Labels appear in display form
//! (underscores replaced by spaces), joined by `", "` in label order.

use crate::datasets::{DatasetKind, LabelSet};
use serde::{Deserialize, Serialize};

/// Prompt asking the model to classify the attached image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationPrompt {
    pub text: String,
    pub kind: DatasetKind,
    /// Display-form labels embedded in the prompt, in label order.
    pub display_labels: Vec<String>,
}

/// Yes/no grading prompt with the label and prediction embedded verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgePrompt {
    pub text: String,
    pub label: String,
    pub prediction: String,
}

/// Sampling parameters for judge queries. Classification queries reuse the
/// same defaults absent other configuration; whatever is used is recorded in
/// run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
}

impl Default for JudgeParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_tokens: 64,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
        }
    }
}

/// One instruction-tuning conversation: a human turn ending in the image
/// placeholder and a model turn naming exactly one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneRecord {
    pub image_ref: String,
    pub human_turn: String,
    pub model_turn: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConversationTurn {
    from: String,
    value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FinetuneRecordWire {
    image: String,
    conversations: Vec<ConversationTurn>,
}

/// Build the classification prompt for a label set.
///
/// Digit tasks ask for "a single number", object tasks for "a single
/// object"; the label list is the display form joined by `", "`.
pub fn classification_prompt(label_set: &LabelSet, kind: DatasetKind) -> ClassificationPrompt {
    let display_labels = label_set.display_labels();
    let joined = display_labels.join(", ");
    let noun = match kind {
        DatasetKind::Digit => "number",
        DatasetKind::Object => "object",
    };
    ClassificationPrompt {
        text: format!(
            "What is the {noun} in the image? Please only answer a single {noun} in {joined}."
        ),
        kind,
        display_labels,
    }
}

/// Build the yes/no judge prompt. Label and prediction are embedded
/// verbatim; no escaping is applied.
pub fn judge_prompt(label: &str, prediction: &str) -> JudgePrompt {
    JudgePrompt {
        text: format!(
            "Please only answer the question in yes or no. Is the \"Prediction\" correctly predicting the right \"Label\"? Label: {label}; Prediction: {prediction}."
        ),
        label: label.to_string(),
        prediction: prediction.to_string(),
    }
}

/// Build an instruction-tuning record for one image. The model turn uses the
/// literal "a(n)" article.
pub fn finetune_record(image_ref: &str, label: &str) -> FinetuneRecord {
    FinetuneRecord {
        image_ref: image_ref.to_string(),
        human_turn: "What is the object in the image? <image>".to_string(),
        model_turn: format!("The object is a(n) {label}."),
    }
}

impl FinetuneRecord {
    /// Serialize to the instruction-data wire format:
    /// `{"image": ..., "conversations": [{"from": "human", ...}, {"from": "gpt", ...}]}`.
    pub fn to_json(&self) -> String {
        let wire = FinetuneRecordWire {
            image: self.image_ref.clone(),
            conversations: vec![
                ConversationTurn {
                    from: "human".into(),
                    value: self.human_turn.clone(),
                },
                ConversationTurn {
                    from: "gpt".into(),
                    value: self.model_turn.clone(),
                },
            ],
        };
        serde_json::to_string(&wire).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let wire: FinetuneRecordWire = serde_json::from_str(text)?;
        let mut human = String::new();
        let mut model = String::new();
        for turn in wire.conversations {
            match turn.from.as_str() {
                "human" => human = turn.value,
                _ => model = turn.value,
            }
        }
        Ok(Self {
            image_ref: wire.image,
            human_turn: human,
            model_turn: model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LabelSet;

    fn mnist() -> LabelSet {
        LabelSet::new((0..10).map(|d| d.to_string()).collect()).unwrap()
    }

    fn cifar10() -> LabelSet {
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
    fn mnist_prompt_golden() {
        let p = classification_prompt(&mnist(), DatasetKind::Digit);
        assert_eq!(
            p.text,
            "What is the number in the image? Please only answer a single number in 0, 1, 2, 3, 4, 5, 6, 7, 8, 9."
        );
    }

    #[test]
    fn cifar10_prompt_golden() {
        let p = classification_prompt(&cifar10(), DatasetKind::Object);
        assert_eq!(
            p.text,
            "What is the object in the image? Please only answer a single object in airplane, automobile, bird, cat, deer, dog, frog, horse, ship, truck."
        );
    }

    #[test]
    fn underscored_label_displayed_with_space() {
        let labels = LabelSet::new(vec!["foo_bar".into()]).unwrap();
        let p = classification_prompt(&labels, DatasetKind::Object);
        assert!(p.text.ends_with("single object in foo bar."));
        assert!(!p.text.contains("foo_bar"));
    }

    #[test]
    fn each_display_label_appears_exactly_once() {
        let p = classification_prompt(&cifar10(), DatasetKind::Object);
        for label in &p.display_labels {
            assert!(p.text.contains(label.as_str()));
        }
        // Comma-joined list appears verbatim in label order.
        assert!(p.text.contains(&p.display_labels.join(", ")));
    }

    #[test]
    fn judge_prompt_golden() {
        let jp = judge_prompt("airplane", "The object is an airplane.");
        assert_eq!(
            jp.text,
            "Please only answer the question in yes or no. Is the \"Prediction\" correctly predicting the right \"Label\"? Label: airplane; Prediction: The object is an airplane.."
        );
    }

    #[test]
    fn judge_prompt_identical_slots() {
        let jp = judge_prompt("x", "x");
        assert!(jp.text.contains("Label: x; Prediction: x."));
    }

    #[test]
    fn judge_prompt_embeds_quotes_verbatim() {
        let jp = judge_prompt("a\"b", "he said \"cat\"");
        assert!(jp
            .text
            .contains("Label: a\"b; Prediction: he said \"cat\"."));
    }

    #[test]
    fn judge_prompt_distinct_inputs_distinct_text() {
        let pairs = [("a", "b"), ("b", "a"), ("a", "c"), ("ab", "")];
        for (i, (l1, p1)) in pairs.iter().enumerate() {
            for (l2, p2) in pairs.iter().skip(i + 1) {
                assert_ne!(judge_prompt(l1, p1).text, judge_prompt(l2, p2).text);
            }
        }
    }

    #[test]
    fn judge_params_defaults() {
        let p = JudgeParams::default();
        assert_eq!(p.temperature, 0.2);
        assert_eq!(p.max_tokens, 64);
        assert_eq!(p.top_p, 1.0);
        assert_eq!(p.frequency_penalty, 0.0);
        assert_eq!(p.presence_penalty, 0.0);
    }

    #[test]
    fn finetune_record_golden() {
        let r = finetune_record("airplane/2604.jpg", "airplane");
        assert_eq!(r.human_turn, "What is the object in the image? <image>");
        assert_eq!(r.model_turn, "The object is a(n) airplane.");
        assert_eq!(
            r.to_json(),
            r#"{"image":"airplane/2604.jpg","conversations":[{"from":"human","value":"What is the object in the image? <image>"},{"from":"gpt","value":"The object is a(n) airplane."}]}"#
        );
    }

    #[test]
    fn finetune_record_uses_literal_article() {
        let r = finetune_record("x.jpg", "dog");
        assert_eq!(r.model_turn, "The object is a(n) dog.");
    }

    #[test]
    fn finetune_record_roundtrips() {
        let r = finetune_record("cat/1.png", "cat");
        let back = FinetuneRecord::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}

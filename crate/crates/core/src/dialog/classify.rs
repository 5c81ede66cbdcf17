//! Question detection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuestionJudgment {
    pub is_question: bool,
    /// Confidence in `is_question`, whichever way it went.
    pub confidence: f64,
}

pub trait QuestionClassifier: Send + Sync {
    fn judge(&self, utterance: &str) -> QuestionJudgment;
}

pub fn is_question(classifier: &dyn QuestionClassifier, utterance: &str) -> QuestionJudgment {
    classifier.judge(utterance)
}

pub const INTERROGATIVE_CUES: [&str; 13] = [
    "who", "what", "when", "where", "why", "how", "do", "does", "did", "is", "are", "can", "could",
];
const FUTURE_CUE: &str = "will";

/// A question ends with `?` or opens with an interrogative cue followed by
/// at least two more words.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicQuestionClassifier;

impl QuestionClassifier for HeuristicQuestionClassifier {
    fn judge(&self, utterance: &str) -> QuestionJudgment {
        let text = utterance.trim();
        if text.is_empty() {
            return QuestionJudgment {
                is_question: false,
                confidence: 1.0,
            };
        }
        if text.ends_with('?') {
            return QuestionJudgment {
                is_question: true,
                confidence: 0.95,
            };
        }
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        let cue = words
            .first()
            .is_some_and(|w| INTERROGATIVE_CUES.contains(&w.as_str()) || w == FUTURE_CUE);
        if cue && words.len() >= 3 {
            QuestionJudgment {
                is_question: true,
                confidence: 0.75,
            }
        } else {
            QuestionJudgment {
                is_question: false,
                confidence: 0.9,
            }
        }
    }
}

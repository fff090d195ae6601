//! Deterministic answer extraction and accuracy.
//!
//! Multiple-choice answers are the first standalone capital letter matching
//! `\b[A-E]\b` (restricted to the task's alphabet). Matching is
//! case-sensitive, so a sentence-initial article "A" does count as an answer;
//! the answer-format instruction and `<answer>` tags are what keep that in
//! check. When a well-formed `<answer>...</answer>` span is present, only its
//! contents are searched.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{FormatKind, QAItem, TaskFormat};

static ANSWER_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").expect("valid regex"));
static MC_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[A-E]\b").expect("valid regex"));
static YNM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").expect("valid regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// First letter of the alphabet, tag span first.
    FirstMcLetter,
    /// Only what sits inside `<answer>` tags counts.
    AnswerTag,
    /// First yes/no/maybe, tag span first.
    Ynm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionRule {
    pub kind: RuleKind,
    /// Letters that count as answers (multiple choice only).
    #[serde(default)]
    pub alphabet: Vec<char>,
}

impl ExtractionRule {
    pub fn first_mc_letter(alphabet: &[char]) -> Self {
        Self {
            kind: RuleKind::FirstMcLetter,
            alphabet: alphabet.to_vec(),
        }
    }

    pub fn ynm() -> Self {
        Self {
            kind: RuleKind::Ynm,
            alphabet: Vec::new(),
        }
    }

    pub fn answer_tag(alphabet: &[char]) -> Self {
        Self {
            kind: RuleKind::AnswerTag,
            alphabet: alphabet.to_vec(),
        }
    }

    /// The usual rule for a format: first letter for multiple choice,
    /// yes/no/maybe for ternary.
    pub fn for_format(format: &TaskFormat) -> Self {
        match format.kind {
            FormatKind::MultipleChoice => Self::first_mc_letter(&format.option_alphabet),
            FormatKind::Ternary => Self::ynm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// No answer label anywhere in the response.
    NoMatch,
    /// A well-formed `<answer>` span exists but holds no valid label.
    AmbiguousTag,
    /// The model call itself failed after retries.
    CallFailed,
}

/// One graded response. Serializes to the graded-dump line format
/// `{item_id, extracted, gold, correct, failure_reason}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedPrediction {
    pub item_id: String,
    #[serde(skip)]
    pub raw: String,
    pub extracted: Option<String>,
    pub gold: String,
    pub correct: bool,
    pub failure_reason: Option<FailureReason>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("rule {rule:?} cannot grade item {item_id}")]
    RuleMismatch { rule: RuleKind, item_id: String },
    #[error("cannot compute accuracy of an empty list")]
    EmptyInput,
}

/// Trimmed contents of the first well-formed `<answer>...</answer>` span.
pub fn extract_answer_tag(raw: &str) -> Option<String> {
    ANSWER_TAG.captures(raw).map(|c| c[1].trim().to_owned())
}

fn tag_scope(raw: &str) -> &str {
    ANSWER_TAG
        .captures(raw)
        .and_then(|c| c.get(1))
        .map_or(raw, |m| m.as_str())
}

fn first_letter_in(text: &str, alphabet: &[char]) -> Option<String> {
    MC_LETTER
        .find_iter(text)
        .map(|m| m.as_str())
        .find(|s| s.chars().next().is_some_and(|c| alphabet.contains(&c)))
        .map(str::to_owned)
}

fn first_ynm_in(text: &str) -> Option<String> {
    YNM.find(text).map(|m| m.as_str().to_lowercase())
}

/// First standalone answer letter; an `<answer>` span, when present, is
/// searched first and exclusively.
pub fn extract_mc(raw: &str, alphabet: &[char]) -> Option<String> {
    first_letter_in(tag_scope(raw), alphabet)
}

/// First yes/no/maybe (case-insensitive, returned lower-case), with the same
/// tag precedence as [`extract_mc`].
pub fn extract_ynm(raw: &str) -> Option<String> {
    first_ynm_in(tag_scope(raw))
}

/// Extracts a label from `raw` under `rule` and compares it with the gold.
pub fn grade(
    item: &QAItem,
    raw: &str,
    rule: &ExtractionRule,
) -> Result<GradedPrediction, EvalError> {
    let is_mc = !item.options.is_empty();
    let mismatch = || EvalError::RuleMismatch {
        rule: rule.kind,
        item_id: item.id.clone(),
    };
    let extracted = match rule.kind {
        RuleKind::FirstMcLetter if is_mc => extract_mc(raw, &rule.alphabet),
        RuleKind::Ynm if !is_mc => extract_ynm(raw),
        RuleKind::AnswerTag => ANSWER_TAG.captures(raw).and_then(|c| {
            let inner = c.get(1).map_or("", |m| m.as_str());
            if is_mc {
                first_letter_in(inner, &rule.alphabet)
            } else {
                first_ynm_in(inner)
            }
        }),
        RuleKind::FirstMcLetter | RuleKind::Ynm => return Err(mismatch()),
    };
    let failure_reason = match &extracted {
        Some(_) => None,
        None if ANSWER_TAG.is_match(raw) => Some(FailureReason::AmbiguousTag),
        None => Some(FailureReason::NoMatch),
    };
    let correct = extracted.as_deref() == Some(item.gold.as_str());
    Ok(GradedPrediction {
        item_id: item.id.clone(),
        raw: raw.to_owned(),
        extracted,
        gold: item.gold.clone(),
        correct,
        failure_reason,
    })
}

/// Grade for an item whose model call failed; always incorrect.
pub fn grade_failed_call(item: &QAItem, error: &str) -> GradedPrediction {
    GradedPrediction {
        item_id: item.id.clone(),
        raw: format!("[call failed] {error}"),
        extracted: None,
        gold: item.gold.clone(),
        correct: false,
        failure_reason: Some(FailureReason::CallFailed),
    }
}

/// Fraction correct; extraction failures stay in the denominator.
pub fn accuracy(graded: &[GradedPrediction]) -> Result<f64, EvalError> {
    if graded.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let correct = graded.iter().filter(|g| g.correct).count();
    Ok(correct as f64 / graded.len() as f64)
}

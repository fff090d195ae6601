//! Benchmark items, the canonical JSONL format, and train/dev/test splits.
//!
//! Every benchmark is normalized into one line-delimited JSON shape:
//!
//! ```json
//! {"id": "q1", "question": "...", "context": "...", "options": {"A": "...", "B": "..."}, "gold": "B", "meta": {}}
//! ```
//!
//! `context`, `options` and `meta` are optional. Multiple-choice items carry
//! `options` and a letter `gold`; ternary items carry a `gold` of yes, no or
//! maybe.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::SplitMix64;

pub const TERNARY_LABELS: [&str; 3] = ["yes", "no", "maybe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    /// Letter to option text, iterated in letter order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, String>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl QAItem {
    pub fn multiple_choice<'a>(
        id: impl Into<String>,
        question: impl Into<String>,
        options: impl IntoIterator<Item = (&'a str, &'a str)>,
        gold: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            context: None,
            options: options
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect(),
            gold: gold.into(),
            meta: Default::default(),
        }
    }

    pub fn ternary(
        id: impl Into<String>,
        context: impl Into<String>,
        question: impl Into<String>,
        gold: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            context: Some(context.into()),
            options: BTreeMap::new(),
            gold: gold.into(),
            meta: Default::default(),
        }
    }

    /// Checks the item against `format`, returning the first violation.
    pub fn validate(&self, format: &TaskFormat) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if format.requires_context && self.context.as_deref().is_none_or(|c| c.trim().is_empty()) {
            return Err("context is required for this format".into());
        }
        match format.kind {
            FormatKind::MultipleChoice => {
                if self.options.is_empty() {
                    return Err("multiple-choice item has no options".into());
                }
                for (key, text) in &self.options {
                    if !format.allows_letter(key) {
                        return Err(format!(
                            "option key {key:?} is outside the alphabet {}",
                            format.alphabet_string()
                        ));
                    }
                    if text.trim().is_empty() {
                        return Err(format!("option {key} is empty"));
                    }
                }
                if !self.options.contains_key(&self.gold) {
                    return Err(format!(
                        "gold {:?} is not one of the option keys",
                        self.gold
                    ));
                }
            }
            FormatKind::Ternary => {
                if !TERNARY_LABELS.contains(&self.gold.as_str()) {
                    return Err(format!("gold {:?} is not yes, no or maybe", self.gold));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKind {
    MultipleChoice,
    Ternary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFormat {
    pub kind: FormatKind,
    /// Allowed option letters, a subset of A..E. Empty for ternary tasks.
    pub option_alphabet: Vec<char>,
    pub requires_context: bool,
}

impl TaskFormat {
    /// Multiple choice over the given letters, e.g. `"ABCD"`.
    pub fn multiple_choice(alphabet: &str) -> Result<Self, DatasetError> {
        let mut letters: Vec<char> = alphabet.chars().collect();
        letters.sort_unstable();
        letters.dedup();
        if letters.is_empty() || letters.iter().any(|c| !('A'..='E').contains(c)) {
            return Err(DatasetError::Format(format!(
                "option alphabet must be a non-empty subset of A..E, got {alphabet:?}"
            )));
        }
        Ok(Self {
            kind: FormatKind::MultipleChoice,
            option_alphabet: letters,
            requires_context: false,
        })
    }

    pub fn ternary(requires_context: bool) -> Self {
        Self {
            kind: FormatKind::Ternary,
            option_alphabet: Vec::new(),
            requires_context,
        }
    }

    pub fn allows_letter(&self, key: &str) -> bool {
        let mut chars = key.chars();
        matches!((chars.next(), chars.next()), (Some(c), None) if self.option_alphabet.contains(&c))
    }

    pub fn alphabet_string(&self) -> String {
        self.option_alphabet.iter().collect()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: not a valid item: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error("invalid task format: {0}")]
    Format(String),
    #[error("split cannot be satisfied: {0}")]
    SpecUnsatisfiable(String),
}

/// Loads and validates a canonical JSONL file. Blank lines are skipped; line
/// numbers in errors are 1-based. Ternary golds are lower-cased on load.
pub fn load_jsonl(path: &Path, format: &TaskFormat) -> Result<Vec<QAItem>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, format)
}

pub fn parse_jsonl(text: &str, format: &TaskFormat) -> Result<Vec<QAItem>, DatasetError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut item: QAItem = serde_json::from_str(raw).map_err(|e| DatasetError::Parse {
            line,
            message: e.to_string(),
        })?;
        if format.kind == FormatKind::Ternary {
            item.gold = item.gold.trim().to_lowercase();
        }
        item.validate(format)
            .map_err(|reason| DatasetError::Validation { line, reason })?;
        if !seen.insert(item.id.clone()) {
            return Err(DatasetError::Validation {
                line,
                reason: format!("duplicate id {:?}", item.id),
            });
        }
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// Dev is sampled out of a provided train set; a provided test set passes through.
    DevFromTrain,
    /// Dev, then test, are sampled out of one pool; the rest is train.
    DevTestRestTrain,
}

impl fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitProtocol::DevFromTrain => "dev_from_train",
            SplitProtocol::DevTestRestTrain => "dev_test_rest_train",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dev_size: usize,
    #[serde(default)]
    pub test_size: Option<usize>,
    pub seed: u64,
    pub protocol: SplitProtocol,
}

/// What a split is carved from.
#[derive(Debug, Clone)]
pub enum SplitSource {
    /// A single pool of items (NephSAP-style), or a train-only set under
    /// [`SplitProtocol::DevFromTrain`].
    Pooled(Vec<QAItem>),
    /// Benchmarks shipped with their own train and test files.
    PreSplit {
        train: Vec<QAItem>,
        test: Vec<QAItem>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<QAItem>,
    pub dev: Vec<QAItem>,
    pub test: Vec<QAItem>,
}

impl Splits {
    pub fn ids(items: &[QAItem]) -> Vec<String> {
        items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }
}

/// Removes the items at `picked` from `pool`, returning them in pick order;
/// the rest stay in their original order.
fn take_indices(pool: Vec<QAItem>, picked: &[usize]) -> (Vec<QAItem>, Vec<QAItem>) {
    let mut slots: Vec<Option<QAItem>> = pool.into_iter().map(Some).collect();
    let taken = picked
        .iter()
        .map(|&i| slots[i].take().expect("indices are distinct"))
        .collect();
    let rest = slots.into_iter().flatten().collect();
    (taken, rest)
}

/// Builds train/dev/test splits, deterministically for a given seed.
pub fn make_splits(source: SplitSource, spec: &SplitSpec) -> Result<Splits, DatasetError> {
    let mut rng = SplitMix64::new(spec.seed);
    match spec.protocol {
        SplitProtocol::DevFromTrain => {
            let (train, test) = match source {
                SplitSource::Pooled(train) => (train, Vec::new()),
                SplitSource::PreSplit { train, test } => (train, test),
            };
            let train_ids: HashSet<&str> = train.iter().map(|i| i.id.as_str()).collect();
            if let Some(dup) = test.iter().find(|i| train_ids.contains(i.id.as_str())) {
                return Err(DatasetError::SpecUnsatisfiable(format!(
                    "id {:?} appears in both train and test",
                    dup.id
                )));
            }
            if spec.dev_size > train.len() {
                return Err(DatasetError::SpecUnsatisfiable(format!(
                    "dev_size {} exceeds train size {}",
                    spec.dev_size,
                    train.len()
                )));
            }
            if let Some(t) = spec.test_size.filter(|&t| t != test.len()) {
                return Err(DatasetError::SpecUnsatisfiable(format!(
                    "test_size {t} does not match the provided test set of {}",
                    test.len()
                )));
            }
            let picked = rng.sample_indices(train.len(), spec.dev_size);
            let (dev, train) = take_indices(train, &picked);
            Ok(Splits { train, dev, test })
        }
        SplitProtocol::DevTestRestTrain => {
            let pool = match source {
                SplitSource::Pooled(pool) => pool,
                SplitSource::PreSplit { .. } => {
                    return Err(DatasetError::SpecUnsatisfiable(
                        "dev_test_rest_train needs a single pooled dataset".into(),
                    ))
                }
            };
            let test_size = spec.test_size.ok_or_else(|| {
                DatasetError::SpecUnsatisfiable("dev_test_rest_train requires test_size".into())
            })?;
            let needed = spec.dev_size + test_size;
            if needed > pool.len() {
                return Err(DatasetError::SpecUnsatisfiable(format!(
                    "dev_size {} + test_size {test_size} exceeds {} items",
                    spec.dev_size,
                    pool.len()
                )));
            }
            let picked = rng.sample_indices(pool.len(), needed);
            let (mut dev, train) = take_indices(pool, &picked);
            let test = dev.split_off(spec.dev_size);
            Ok(Splits { train, dev, test })
        }
    }
}

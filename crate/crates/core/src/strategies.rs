//! Message builders for the baseline prompting strategies and for the
//! system-prompt forward pass.
//!
//! Every builder is pure: the same inputs produce byte-identical messages.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{FormatKind, QAItem, TaskFormat};
use crate::gateway::ChatMessage;
use crate::sampling::{seed_for, SplitMix64};

/// Default number of few-shot exemplars.
pub const DEFAULT_K: usize = 5;

/// Chain-of-thought conversation format in the DeepSeek-R1 style.
pub const COT_TEMPLATE: &str = "A conversation between User and Assistant. The user asks a question, \
and the Assistant solves it. The assistant first thinks about the reasoning process in the mind and \
then provides the user with the answer. The reasoning process and answer are enclosed within \
<think> </think> and <answer> </answer> tags, respectively, i.e.,\n\
<think> reasoning process here </think>\n\
<answer> answer here </answer>";

const TERNARY_INSTRUCTION: &str = "Answer yes, no, or maybe.";
const TERNARY_COT_INSTRUCTION: &str =
    "Answer yes, no, or maybe inside the <answer> </answer> tags.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    FewShot,
    Cot,
    SystemPrompt,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero-shot",
            StrategyKind::FewShot => "few-shot",
            StrategyKind::Cot => "cot",
            StrategyKind::SystemPrompt => "system-prompt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub system_text: Option<String>,
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

impl PromptStrategy {
    pub fn zero_shot() -> Self {
        Self {
            kind: StrategyKind::ZeroShot,
            k: None,
            system_text: None,
            rng_seed: None,
        }
    }

    pub fn few_shot(k: usize, rng_seed: u64) -> Self {
        Self {
            kind: StrategyKind::FewShot,
            k: Some(k),
            rng_seed: Some(rng_seed),
            ..Self::zero_shot()
        }
    }

    pub fn cot() -> Self {
        Self {
            kind: StrategyKind::Cot,
            ..Self::zero_shot()
        }
    }

    pub fn system_prompt(text: impl Into<String>) -> Self {
        Self {
            kind: StrategyKind::SystemPrompt,
            system_text: Some(text.into()),
            ..Self::zero_shot()
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        match self.kind {
            StrategyKind::FewShot if self.k.is_none() => {
                Err(StrategyError::InvalidStrategy("few-shot requires k".into()))
            }
            StrategyKind::SystemPrompt if self.system_text.is_none() => {
                Err(StrategyError::InvalidStrategy(
                    "system-prompt strategy requires system_text".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Training items available as few-shot exemplars.
#[derive(Debug, Clone, Default)]
pub struct ExemplarPool {
    pub items: Vec<QAItem>,
}

impl ExemplarPool {
    pub fn new(items: Vec<QAItem>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Ensures no pool item shares an id with `others` (dev or test items).
    pub fn check_disjoint(&self, others: &[QAItem]) -> Result<(), StrategyError> {
        let ids: HashSet<&str> = self.items.iter().map(|i| i.id.as_str()).collect();
        match others.iter().find(|o| ids.contains(o.id.as_str())) {
            Some(o) => Err(StrategyError::ItemInPool(o.id.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StrategyError {
    #[error("item cannot be rendered: {0}")]
    Format(String),
    #[error("exemplar pool has {pool} items but k = {k}")]
    PoolTooSmall { pool: usize, k: usize },
    #[error("target item {0} is in the exemplar pool")]
    ItemInPool(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

fn render_body(item: &QAItem, format: &TaskFormat) -> Result<String, StrategyError> {
    item.validate(format).map_err(StrategyError::Format)?;
    let mut out = String::new();
    if let Some(ctx) = item.context.as_deref().filter(|c| !c.trim().is_empty()) {
        out.push_str("Context: ");
        out.push_str(ctx);
        out.push_str("\n\n");
    }
    out.push_str("Question: ");
    out.push_str(&item.question);
    if format.kind == FormatKind::MultipleChoice {
        out.push('\n');
        for (letter, text) in &item.options {
            out.push('\n');
            out.push_str(letter);
            out.push_str(". ");
            out.push_str(text);
        }
    }
    Ok(out)
}

fn answer_instruction(item: &QAItem, format: &TaskFormat) -> String {
    match format.kind {
        FormatKind::Ternary => TERNARY_INSTRUCTION.to_owned(),
        FormatKind::MultipleChoice => {
            let letters: Vec<&str> = item.options.keys().map(String::as_str).collect();
            format!(
                "Respond with the single letter of the correct option ({}).",
                letters.join(", ")
            )
        }
    }
}

/// The user turn shared by zero-shot, few-shot and system-prompt strategies:
/// rendered question followed by the answer-format instruction.
pub fn render_user_turn(item: &QAItem, format: &TaskFormat) -> Result<String, StrategyError> {
    let body = render_body(item, format)?;
    Ok(format!("{body}\n\n{}", answer_instruction(item, format)))
}

pub fn build_zero_shot(
    item: &QAItem,
    format: &TaskFormat,
) -> Result<Vec<ChatMessage>, StrategyError> {
    Ok(vec![ChatMessage::user(render_user_turn(item, format)?)])
}

/// `k` exemplars drawn without replacement from `pool`, seeded by
/// `rng_seed` and the item id, as alternating user/assistant turns before
/// the target question.
pub fn build_few_shot(
    item: &QAItem,
    format: &TaskFormat,
    pool: &ExemplarPool,
    k: usize,
    rng_seed: u64,
) -> Result<Vec<ChatMessage>, StrategyError> {
    if pool.len() < k {
        return Err(StrategyError::PoolTooSmall {
            pool: pool.len(),
            k,
        });
    }
    if pool.items.iter().any(|p| p.id == item.id) {
        return Err(StrategyError::ItemInPool(item.id.clone()));
    }
    let target = render_user_turn(item, format)?;
    let mut rng = SplitMix64::new(seed_for(rng_seed, &item.id));
    let mut messages = Vec::with_capacity(2 * k + 1);
    for idx in rng.sample_indices(pool.len(), k) {
        let ex = &pool.items[idx];
        messages.push(ChatMessage::user(render_user_turn(ex, format)?));
        messages.push(ChatMessage::assistant(ex.gold.clone()));
    }
    messages.push(ChatMessage::user(target));
    Ok(messages)
}

pub fn build_cot(item: &QAItem, format: &TaskFormat) -> Result<Vec<ChatMessage>, StrategyError> {
    let mut user = render_body(item, format)?;
    if format.kind == FormatKind::Ternary {
        user.push_str("\n\n");
        user.push_str(TERNARY_COT_INSTRUCTION);
    }
    Ok(vec![
        ChatMessage::system(COT_TEMPLATE),
        ChatMessage::user(user),
    ])
}

pub fn build_with_system_prompt(
    item: &QAItem,
    system_text: &str,
    format: &TaskFormat,
) -> Result<Vec<ChatMessage>, StrategyError> {
    if system_text.trim().is_empty() {
        return Err(StrategyError::Format("system prompt is empty".into()));
    }
    Ok(vec![
        ChatMessage::system(system_text),
        ChatMessage::user(render_user_turn(item, format)?),
    ])
}

/// Dispatches on the strategy kind.
pub fn build_messages(
    strategy: &PromptStrategy,
    item: &QAItem,
    format: &TaskFormat,
    pool: &ExemplarPool,
) -> Result<Vec<ChatMessage>, StrategyError> {
    strategy.validate()?;
    match strategy.kind {
        StrategyKind::ZeroShot => build_zero_shot(item, format),
        StrategyKind::FewShot => build_few_shot(
            item,
            format,
            pool,
            strategy.k.unwrap_or(DEFAULT_K),
            strategy.rng_seed.unwrap_or(0),
        ),
        StrategyKind::Cot => build_cot(item, format),
        StrategyKind::SystemPrompt => {
            build_with_system_prompt(item, strategy.system_text.as_deref().unwrap_or(""), format)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{validate_messages, Role};
    use proptest::prelude::*;

    fn mc(id: &str) -> QAItem {
        QAItem::multiple_choice(
            id,
            format!("Question {id}?"),
            [
                ("A", "alpha"),
                ("B", "beta"),
                ("C", "gamma"),
                ("D", "delta"),
            ],
            "B",
        )
    }

    fn abcd() -> TaskFormat {
        TaskFormat::multiple_choice("ABCD").unwrap()
    }

    fn pool(n: usize) -> ExemplarPool {
        ExemplarPool::new((0..n).map(|i| mc(&format!("p{i}"))).collect())
    }

    #[test]
    fn zero_shot_mc_lists_options() {
        let msgs = build_zero_shot(&mc("q"), &abcd()).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].role, Role::User);
        for line in ["A. alpha", "B. beta", "C. gamma", "D. delta"] {
            assert!(msgs[0].content.lines().any(|l| l == line), "{line}");
        }
        assert!(msgs[0]
            .content
            .ends_with("Respond with the single letter of the correct option (A, B, C, D)."));
    }

    #[test]
    fn ternary_puts_context_before_question() {
        let item = QAItem::ternary("t", "The abstract text.", "Does it work?", "yes");
        let msgs = build_zero_shot(&item, &TaskFormat::ternary(true)).unwrap();
        let c = &msgs[0].content;
        assert!(c.find("The abstract text.").unwrap() < c.find("Does it work?").unwrap());
        assert!(c.contains("yes, no, or maybe"));
    }

    #[test]
    fn empty_options_is_format_error() {
        let mut item = mc("q");
        item.options.clear();
        assert!(matches!(
            build_zero_shot(&item, &abcd()),
            Err(StrategyError::Format(_))
        ));
    }

    #[test]
    fn few_shot_k0_equals_zero_shot() {
        let item = mc("q");
        assert_eq!(
            build_few_shot(&item, &abcd(), &pool(3), 0, 9).unwrap(),
            build_zero_shot(&item, &abcd()).unwrap()
        );
    }

    #[test]
    fn few_shot_is_reproducible_and_alternates() {
        let item = mc("q");
        let a = build_few_shot(&item, &abcd(), &pool(10), 2, 42).unwrap();
        let b = build_few_shot(&item, &abcd(), &pool(10), 2, 42).unwrap();
        assert_eq!(a, b);
        let roles: Vec<Role> = a.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [
                Role::User,
                Role::Assistant,
                Role::User,
                Role::Assistant,
                Role::User
            ]
        );
        assert_eq!(a[1].content, "B");
    }

    #[test]
    fn few_shot_pool_errors() {
        assert_eq!(
            build_few_shot(&mc("q"), &abcd(), &pool(1), 5, 0),
            Err(StrategyError::PoolTooSmall { pool: 1, k: 5 })
        );
        assert_eq!(
            build_few_shot(&mc("p0"), &abcd(), &pool(3), 1, 0),
            Err(StrategyError::ItemInPool("p0".into()))
        );
    }

    #[test]
    fn cot_carries_template() {
        let msgs = build_cot(&mc("q"), &abcd()).unwrap();
        assert_eq!(msgs[0].role, Role::System);
        assert!(msgs[0].content.contains("<think>") && msgs[0].content.contains("<answer>"));
        let t = QAItem::ternary("t", "ctx", "q?", "no");
        let msgs = build_cot(&t, &TaskFormat::ternary(true)).unwrap();
        assert_eq!(msgs[0].content, COT_TEMPLATE);
        assert!(msgs[1]
            .content
            .contains("yes, no, or maybe inside the <answer>"));
    }

    #[test]
    fn system_prompt_is_verbatim() {
        let seed = "You are a helpful, creative, and smart assistant.";
        let msgs = build_with_system_prompt(&mc("q"), seed, &abcd()).unwrap();
        assert_eq!(msgs[0], ChatMessage::system(seed));
        assert!(msgs[1].content.contains("Respond with the single letter"));
        assert!(matches!(
            build_with_system_prompt(&mc("q"), "  ", &abcd()),
            Err(StrategyError::Format(_))
        ));
    }

    #[test]
    fn strategy_invariants() {
        let mut s = PromptStrategy::few_shot(2, 0);
        s.k = None;
        assert!(s.validate().is_err());
        let mut s = PromptStrategy::system_prompt("x");
        s.system_text = None;
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn built_messages_satisfy_request_invariants(k in 0usize..6, seed: u64, kind in 0u8..4) {
            let strategy = match kind {
                0 => PromptStrategy::zero_shot(),
                1 => PromptStrategy::few_shot(k, seed),
                2 => PromptStrategy::cot(),
                _ => PromptStrategy::system_prompt("Be precise."),
            };
            let item = mc("target");
            let p = pool(8);
            let msgs = build_messages(&strategy, &item, &abcd(), &p).unwrap();
            prop_assert!(validate_messages(&msgs).is_ok());
            prop_assert_eq!(&msgs, &build_messages(&strategy, &item, &abcd(), &p).unwrap());
            // Exemplar turns never mention the target question.
            for m in &msgs[..msgs.len() - 1] {
                prop_assert!(!m.content.contains("Question target?"));
            }
        }
    }
}

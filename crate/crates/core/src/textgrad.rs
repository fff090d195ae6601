//! The two-node computation graph (prompt -> response -> loss) and its
//! textual backward pass.
//!
//! For one training item the pipeline is: a task-model forward call under the
//! current system prompt, then three backward-engine calls producing the
//! natural-language loss, the feedback on the response, and the feedback on
//! the prompt. A separate [`tgd_step`] call turns the accumulated prompt
//! feedback into a single candidate rewrite.
//!
//! The backward instructions are the fixed assets in `assets/`, identified by
//! [`TEMPLATE_VERSION`].

use std::collections::HashMap;
use std::sync::{Arc, LazyLock};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{QAItem, TaskFormat};
use crate::extract::{grade, EvalError, ExtractionRule};
use crate::gateway::{
    cache_key, ChatMessage, ChatRequest, ChatResponse, Gateway, GatewayError, BACKWARD_MAX_TOKENS,
    BACKWARD_TEMPERATURE, TASK_MAX_TOKENS, TASK_TEMPERATURE,
};
use crate::strategies::{build_with_system_prompt, StrategyError};

pub const TEMPLATE_VERSION: &str = "v1";
pub const BACKWARD_SYSTEM: &str = include_str!("../assets/backward_system.txt");
pub const LOSS_TEMPLATE: &str = include_str!("../assets/loss.txt");
pub const RESPONSE_GRAD_TEMPLATE: &str = include_str!("../assets/response_grad.txt");
pub const PROMPT_GRAD_TEMPLATE: &str = include_str!("../assets/prompt_grad.txt");
pub const TGD_TEMPLATE: &str = include_str!("../assets/tgd_step.txt");

/// Default cap on candidate prompt length, in characters.
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 2000;

/// Where in the pipeline an engine call was made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forward,
    Loss,
    ResponseGradient,
    PromptGradient,
    TgdStep,
    DevEval,
    TestEval,
    Baseline,
}

impl Stage {
    /// First line of the instruction sent for backward stages; handy for
    /// routing scripted replies.
    pub fn marker(self) -> Option<&'static str> {
        let template = match self {
            Stage::Loss => LOSS_TEMPLATE,
            Stage::ResponseGradient => RESPONSE_GRAD_TEMPLATE,
            Stage::PromptGradient => PROMPT_GRAD_TEMPLATE,
            Stage::TgdStep => TGD_TEMPLATE,
            _ => return None,
        };
        template.lines().next()
    }

    pub fn is_backward(self) -> bool {
        matches!(
            self,
            Stage::Loss | Stage::ResponseGradient | Stage::PromptGradient | Stage::TgdStep
        )
    }
}

/// One engine call, as written to the transcript log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineCall {
    pub timestamp: DateTime<Utc>,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub model: String,
    pub request_digest: String,
    pub response: String,
    pub from_cache: bool,
}

/// Engine calls in pipeline order.
pub type Tape = Vec<EngineCall>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EngineSettings {
    pub fn task(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: TASK_TEMPERATURE,
            max_tokens: TASK_MAX_TOKENS,
            seed: None,
        }
    }

    pub fn backward(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: BACKWARD_TEMPERATURE,
            max_tokens: BACKWARD_MAX_TOKENS,
            seed: None,
        }
    }

    fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(self.model.clone(), messages)
            .with_temperature(self.temperature)
            .with_max_tokens(self.max_tokens)
            .with_seed(self.seed)
    }
}

/// The task model and backward engine, plus the fan-out bound for per-item
/// work.
#[derive(Clone)]
pub struct Engines {
    pub task: Arc<Gateway>,
    pub task_settings: EngineSettings,
    pub backward: Arc<Gateway>,
    pub backward_settings: EngineSettings,
    workers: Arc<rayon::ThreadPool>,
}

impl std::fmt::Debug for Engines {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engines")
            .field("task", &self.task_settings.model)
            .field("backward", &self.backward_settings.model)
            .field("parallelism", &self.parallelism())
            .finish()
    }
}

impl Engines {
    pub fn new(
        task: Arc<Gateway>,
        task_settings: EngineSettings,
        backward: Arc<Gateway>,
        backward_settings: EngineSettings,
        parallelism: usize,
    ) -> Self {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .thread_name(|i| format!("engine-worker-{i}"))
            .build()
            .expect("worker pool");
        Self {
            task,
            task_settings,
            backward,
            backward_settings,
            workers: Arc::new(workers),
        }
    }

    pub fn parallelism(&self) -> usize {
        self.workers.current_num_threads()
    }

    /// Maps `f` over `items` on the worker pool, keeping input order.
    pub fn fan_out<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        self.workers
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }

    pub(crate) fn call_task(
        &self,
        stage: Stage,
        item_id: Option<&str>,
        messages: Vec<ChatMessage>,
        tape: &mut Tape,
    ) -> Result<ChatResponse, GatewayError> {
        call(
            &self.task,
            &self.task_settings,
            stage,
            item_id,
            messages,
            tape,
        )
    }

    fn call_backward(
        &self,
        stage: Stage,
        item_id: Option<&str>,
        instruction: String,
        tape: &mut Tape,
    ) -> Result<ChatResponse, GatewayError> {
        let messages = vec![
            ChatMessage::system(BACKWARD_SYSTEM.trim_end()),
            ChatMessage::user(instruction),
        ];
        call(
            &self.backward,
            &self.backward_settings,
            stage,
            item_id,
            messages,
            tape,
        )
    }
}

fn call(
    gateway: &Gateway,
    settings: &EngineSettings,
    stage: Stage,
    item_id: Option<&str>,
    messages: Vec<ChatMessage>,
    tape: &mut Tape,
) -> Result<ChatResponse, GatewayError> {
    let request = settings.request(messages);
    let response = gateway.complete(&request)?;
    tape.push(EngineCall {
        timestamp: Utc::now(),
        stage,
        item_id: item_id.map(str::to_owned),
        model: settings.model.clone(),
        request_digest: cache_key(&request),
        response: response.content.clone(),
        from_cache: response.from_cache,
    });
    Ok(response)
}

/// Substitutes `{name}` placeholders in one pass, so values that happen to
/// contain placeholder syntax are left alone.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    static PLACEHOLDER: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));
    let map: HashMap<&str, &str> = values.iter().copied().collect();
    PLACEHOLDER
        .replace_all(template.trim_end(), |c: &regex::Captures<'_>| {
            map.get(&c[1])
                .map_or_else(|| c[0].to_owned(), |v| (*v).to_owned())
        })
        .into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Loss,
    ResponseGrad,
    PromptGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextualFeedback {
    pub body: String,
    pub kind: FeedbackKind,
    pub source_item_id: String,
    pub engine_model: String,
}

/// The optimizable system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariable {
    pub text: String,
    pub requires_grad: bool,
    /// Prompt feedback accumulated since the last [`tgd_step`].
    pub grads: Vec<TextualFeedback>,
    /// Notes about skipped work, e.g. gradients requested on a frozen prompt.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PromptVariable {
    pub fn new(text: impl Into<String>, requires_grad: bool) -> Self {
        Self {
            text: text.into(),
            requires_grad,
            grads: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn trainable(text: impl Into<String>) -> Self {
        Self::new(text, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRecord {
    pub item_id: String,
    pub messages: Vec<ChatMessage>,
    pub prediction: String,
    pub extracted: Option<String>,
    pub correct: Option<bool>,
}

impl ForwardRecord {
    /// The rendered question as the task model saw it.
    pub fn question(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == crate::gateway::Role::User)
            .map_or("", |m| m.content.as_str())
    }

    pub fn grade(&mut self, item: &QAItem, rule: &ExtractionRule) -> Result<(), EvalError> {
        let g = grade(item, &self.prediction, rule)?;
        self.extracted = g.extracted;
        self.correct = Some(g.correct);
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TextGradError {
    #[error("{stage:?} call failed{}: {source}", item_id.as_deref().map(|i| format!(" for item {i}")).unwrap_or_default())]
    Engine {
        stage: Stage,
        item_id: Option<String>,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no prompt gradients to apply")]
    EmptyGradients,
    #[error("the prompt does not require gradients")]
    FrozenParameter,
    #[error("candidate prompt is empty")]
    EmptyCandidate,
    #[error("candidate prompt has {len} characters, over the {max} limit")]
    CandidateTooLong { len: usize, max: usize },
    #[error("backward pass needs at least one item")]
    EmptyBatch,
    #[error("every item in the batch failed; first: {first}")]
    AllItemsFailed {
        first: String,
        failures: Vec<ItemFailure>,
    },
}

impl TextGradError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            TextGradError::Engine { source, .. } => Some(source),
            _ => None,
        }
    }

    pub fn is_fatal(&self) -> bool {
        self.gateway_error().is_some_and(GatewayError::is_fatal)
    }
}

fn engine_err(stage: Stage, item_id: &str) -> impl FnOnce(GatewayError) -> TextGradError + '_ {
    move |source| TextGradError::Engine {
        stage,
        item_id: Some(item_id.to_owned()),
        source,
    }
}

/// Runs the task model on one item under `prompt`.
pub fn forward(
    item: &QAItem,
    format: &TaskFormat,
    prompt: &PromptVariable,
    engines: &Engines,
    stage: Stage,
    tape: &mut Tape,
) -> Result<ForwardRecord, TextGradError> {
    if prompt.text.trim().is_empty() {
        return Err(TextGradError::Precondition("prompt text is empty".into()));
    }
    let messages = build_with_system_prompt(item, &prompt.text, format)?;
    let response = engines
        .call_task(stage, Some(&item.id), messages.clone(), tape)
        .map_err(engine_err(stage, &item.id))?;
    Ok(ForwardRecord {
        item_id: item.id.clone(),
        messages,
        prediction: response.content,
        extracted: None,
        correct: None,
    })
}

/// Asks the backward engine to critique the prediction against the gold
/// answer. The critique is returned verbatim.
pub fn natural_language_loss(
    record: &ForwardRecord,
    gold: &str,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<TextualFeedback, TextGradError> {
    if record.prediction.trim().is_empty() {
        return Err(TextGradError::Precondition(format!(
            "item {} has an empty prediction",
            record.item_id
        )));
    }
    let instruction = fill(
        LOSS_TEMPLATE,
        &[
            ("question", record.question()),
            ("response", &record.prediction),
            ("gold", gold),
        ],
    );
    let response = engines
        .call_backward(Stage::Loss, Some(&record.item_id), instruction, tape)
        .map_err(engine_err(Stage::Loss, &record.item_id))?;
    feedback(response, FeedbackKind::Loss, &record.item_id, engines)
}

fn feedback(
    response: ChatResponse,
    kind: FeedbackKind,
    item_id: &str,
    engines: &Engines,
) -> Result<TextualFeedback, TextGradError> {
    if response.content.trim().is_empty() {
        return Err(TextGradError::Precondition(format!(
            "backward engine returned empty {kind:?} feedback for item {item_id}"
        )));
    }
    Ok(TextualFeedback {
        body: response.content,
        kind,
        source_item_id: item_id.to_owned(),
        engine_model: engines.backward_settings.model.clone(),
    })
}

/// Feedback on how the response should change to better match the gold answer.
pub fn grad_response(
    loss: &TextualFeedback,
    record: &ForwardRecord,
    gold: &str,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<TextualFeedback, TextGradError> {
    if loss.kind != FeedbackKind::Loss {
        return Err(TextGradError::Precondition(format!(
            "expected loss feedback, got {:?}",
            loss.kind
        )));
    }
    if loss.source_item_id != record.item_id {
        return Err(TextGradError::Precondition(format!(
            "loss belongs to item {}, record to {}",
            loss.source_item_id, record.item_id
        )));
    }
    let instruction = fill(
        RESPONSE_GRAD_TEMPLATE,
        &[
            ("question", record.question()),
            ("response", &record.prediction),
            ("gold", gold),
            ("loss", &loss.body),
        ],
    );
    let response = engines
        .call_backward(
            Stage::ResponseGradient,
            Some(&record.item_id),
            instruction,
            tape,
        )
        .map_err(engine_err(Stage::ResponseGradient, &record.item_id))?;
    feedback(
        response,
        FeedbackKind::ResponseGrad,
        &record.item_id,
        engines,
    )
}

fn prompt_feedback(
    prompt_text: &str,
    record: &ForwardRecord,
    response_grad: &TextualFeedback,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<TextualFeedback, TextGradError> {
    if response_grad.kind != FeedbackKind::ResponseGrad {
        return Err(TextGradError::Precondition(format!(
            "expected response feedback, got {:?}",
            response_grad.kind
        )));
    }
    let instruction = fill(
        PROMPT_GRAD_TEMPLATE,
        &[
            ("system_prompt", prompt_text),
            ("question", record.question()),
            ("response", &record.prediction),
            ("response_feedback", &response_grad.body),
        ],
    );
    let response = engines
        .call_backward(
            Stage::PromptGradient,
            Some(&record.item_id),
            instruction,
            tape,
        )
        .map_err(engine_err(Stage::PromptGradient, &record.item_id))?;
    feedback(response, FeedbackKind::PromptGrad, &record.item_id, engines)
}

/// Feedback on the system prompt, appended to `prompt.grads`.
///
/// On a frozen prompt this makes no call, records a warning and returns
/// `Ok(None)`.
pub fn grad_prompt(
    prompt: &mut PromptVariable,
    record: &ForwardRecord,
    response_grad: &TextualFeedback,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<Option<TextualFeedback>, TextGradError> {
    if !prompt.requires_grad {
        prompt.warnings.push(format!(
            "skipped prompt gradient for item {}: prompt does not require gradients",
            record.item_id
        ));
        return Ok(None);
    }
    let g = prompt_feedback(&prompt.text, record, response_grad, engines, tape)?;
    prompt.grads.push(g.clone());
    Ok(Some(g))
}

fn parse_candidate(raw: &str) -> String {
    static IMPROVED: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?s)<IMPROVED_PROMPT>(.*?)</IMPROVED_PROMPT>").expect("valid regex")
    });
    IMPROVED
        .captures(raw)
        .map_or(raw, |c| c.get(1).map_or("", |m| m.as_str()))
        .trim()
        .to_owned()
}

/// Asks the backward engine for one rewrite of the prompt given every
/// accumulated prompt gradient. `prompt.grads` is always empty afterwards,
/// and `prompt.text` is left untouched: accepting the candidate is the
/// caller's decision.
pub fn tgd_step(
    prompt: &mut PromptVariable,
    engines: &Engines,
    max_chars: usize,
    tape: &mut Tape,
) -> Result<String, TextGradError> {
    if !prompt.requires_grad {
        prompt.grads.clear();
        return Err(TextGradError::FrozenParameter);
    }
    let grads = std::mem::take(&mut prompt.grads);
    if grads.is_empty() {
        return Err(TextGradError::EmptyGradients);
    }
    let feedback = grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            format!(
                "<FEEDBACK_{n}>\n{}\n</FEEDBACK_{n}>",
                g.body.trim(),
                n = i + 1
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let max = max_chars.to_string();
    let instruction = fill(
        TGD_TEMPLATE,
        &[
            ("system_prompt", &prompt.text),
            ("feedback", &feedback),
            ("max_chars", &max),
        ],
    );
    let response = engines
        .call_backward(Stage::TgdStep, None, instruction, tape)
        .map_err(|source| TextGradError::Engine {
            stage: Stage::TgdStep,
            item_id: None,
            source,
        })?;
    let candidate = parse_candidate(&response.content);
    if candidate.is_empty() {
        return Err(TextGradError::EmptyCandidate);
    }
    let len = candidate.chars().count();
    if len > max_chars {
        return Err(TextGradError::CandidateTooLong {
            len,
            max: max_chars,
        });
    }
    Ok(candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

/// Result of a backward pass over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub forwards: Vec<ForwardRecord>,
    /// Prompt gradients, in item order (also appended to `prompt.grads`).
    pub gradients: Vec<TextualFeedback>,
    pub failures: Vec<ItemFailure>,
}

type ItemResult = Result<(ForwardRecord, Option<TextualFeedback>), TextGradError>;

fn item_pipeline(
    item: &QAItem,
    format: &TaskFormat,
    prompt: &PromptVariable,
    engines: &Engines,
    tape: &mut Tape,
) -> ItemResult {
    let record = forward(item, format, prompt, engines, Stage::Forward, tape)?;
    let loss = natural_language_loss(&record, &item.gold, engines, tape)?;
    let rgrad = grad_response(&loss, &record, &item.gold, engines, tape)?;
    let pgrad = if prompt.requires_grad {
        Some(prompt_feedback(
            &prompt.text,
            &record,
            &rgrad,
            engines,
            tape,
        )?)
    } else {
        None
    };
    Ok((record, pgrad))
}

/// Forward, loss, response gradient and prompt gradient for every item.
///
/// Items run concurrently on the engines' worker pool; results, gradients and
/// tape entries are merged in item order. Failing items are collected. The
/// batch fails only if every item fails, or if any failure is fatal (such as
/// an authentication error).
pub fn backward_batch(
    items: &[QAItem],
    format: &TaskFormat,
    prompt: &mut PromptVariable,
    engines: &Engines,
    tape: &mut Tape,
) -> Result<BatchOutcome, TextGradError> {
    if items.is_empty() {
        return Err(TextGradError::EmptyBatch);
    }
    let snapshot = PromptVariable {
        grads: Vec::new(),
        warnings: Vec::new(),
        ..prompt.clone()
    };
    let results: Vec<(ItemResult, Tape)> = engines.fan_out(items, |_, item| {
        let mut local = Tape::new();
        let r = item_pipeline(item, format, &snapshot, engines, &mut local);
        (r, local)
    });

    let mut outcome = BatchOutcome {
        forwards: Vec::new(),
        gradients: Vec::new(),
        failures: Vec::new(),
    };
    let mut first_fatal = None;
    for (item, (result, local)) in items.iter().zip(results) {
        tape.extend(local);
        match result {
            Ok((record, pgrad)) => {
                outcome.forwards.push(record);
                match pgrad {
                    Some(g) => {
                        prompt.grads.push(g.clone());
                        outcome.gradients.push(g);
                    }
                    None => prompt.warnings.push(format!(
                        "skipped prompt gradient for item {}: prompt does not require gradients",
                        item.id
                    )),
                }
            }
            Err(err) => {
                tracing::warn!(item = %item.id, "backward pipeline failed: {err}");
                outcome.failures.push(ItemFailure {
                    item_id: item.id.clone(),
                    error: err.to_string(),
                });
                if err.is_fatal() && first_fatal.is_none() {
                    first_fatal = Some(err);
                }
            }
        }
    }
    if let Some(err) = first_fatal {
        return Err(err);
    }
    if outcome.forwards.is_empty() {
        return Err(TextGradError::AllItemsFailed {
            first: outcome.failures[0].error.clone(),
            failures: outcome.failures,
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, MockBackend, MockMatcher, MockReply, MockScript};

    fn mock(script: MockScript) -> (Arc<MockBackend>, Arc<Gateway>) {
        let backend = Arc::new(MockBackend::new(script).unwrap());
        let mut cfg = BackendConfig::mock();
        cfg.retry_limit = 0;
        let gw = Arc::new(Gateway::new(backend.clone(), &cfg).unwrap());
        (backend, gw)
    }

    fn engines(
        task: MockScript,
        backward: MockScript,
    ) -> (Arc<MockBackend>, Arc<MockBackend>, Engines) {
        let (tb, tg) = mock(task);
        let (bb, bg) = mock(backward);
        let e = Engines::new(
            tg,
            EngineSettings::task("task"),
            bg,
            EngineSettings::backward("bw"),
            4,
        );
        (tb, bb, e)
    }

    fn scripted_backward() -> MockScript {
        MockScript::new()
            .contains(Stage::Loss.marker().unwrap(), "LOSS")
            .contains(Stage::ResponseGradient.marker().unwrap(), "RGRAD")
            .contains(Stage::PromptGradient.marker().unwrap(), "PGRAD")
            .contains(
                Stage::TgdStep.marker().unwrap(),
                "<IMPROVED_PROMPT>NEW PROMPT</IMPROVED_PROMPT>",
            )
    }

    fn item(id: &str) -> QAItem {
        QAItem::multiple_choice(
            id,
            format!("Question {id}"),
            [("A", "x"), ("B", "y"), ("C", "z")],
            "A",
        )
    }

    fn fmt() -> TaskFormat {
        TaskFormat::multiple_choice("ABC").unwrap()
    }

    #[test]
    fn fill_is_single_pass() {
        let out = fill(
            "Q={question} R={response}",
            &[("question", "{response}"), ("response", "r")],
        );
        assert_eq!(out, "Q={response} R=r");
        assert_eq!(fill("{unknown}", &[]), "{unknown}");
    }

    #[test]
    fn markers_are_distinct() {
        let m: std::collections::HashSet<_> = [
            Stage::Loss,
            Stage::ResponseGradient,
            Stage::PromptGradient,
            Stage::TgdStep,
        ]
        .iter()
        .map(|s| s.marker().unwrap())
        .collect();
        assert_eq!(m.len(), 4);
        assert_eq!(Stage::Forward.marker(), None);
    }

    #[test]
    fn forward_records_prediction() {
        let (_, _, e) = engines(MockScript::new().catch_all("C"), scripted_backward());
        let mut tape = Tape::new();
        let p = PromptVariable::trainable("seed");
        let rec = forward(&item("1"), &fmt(), &p, &e, Stage::Forward, &mut tape).unwrap();
        assert_eq!(rec.prediction, "C");
        assert_eq!(rec.messages[0], ChatMessage::system("seed"));
        assert_eq!(tape.len(), 1);
        assert_eq!(tape[0].stage, Stage::Forward);
    }

    #[test]
    fn forward_error_carries_item_id() {
        let script = MockScript::new().rule(
            MockMatcher::CatchAll,
            MockReply::Fail(crate::gateway::MockFailure::Transient),
        );
        let (_, _, e) = engines(script, scripted_backward());
        let p = PromptVariable::trainable("seed");
        let err = forward(
            &item("q-77"),
            &fmt(),
            &p,
            &e,
            Stage::Forward,
            &mut Tape::new(),
        )
        .unwrap_err();
        match &err {
            TextGradError::Engine {
                item_id, source, ..
            } => {
                assert_eq!(item_id.as_deref(), Some("q-77"));
                assert!(matches!(source, GatewayError::Transport { .. }));
            }
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("q-77"));
    }

    #[test]
    fn loss_is_verbatim_and_checks_prediction() {
        let backward = MockScript::new().catch_all("PERFECT");
        let (_, bb, e) = engines(MockScript::new().catch_all("A"), backward);
        let mut tape = Tape::new();
        let p = PromptVariable::trainable("seed");
        let rec = forward(&item("1"), &fmt(), &p, &e, Stage::Forward, &mut tape).unwrap();
        let loss = natural_language_loss(&rec, "A", &e, &mut tape).unwrap();
        assert_eq!(loss.body, "PERFECT");
        assert_eq!(loss.kind, FeedbackKind::Loss);
        let sent = &bb.calls()[0];
        let user = sent.last_user_text().unwrap();
        assert!(user.contains("Question 1") && user.contains("<GROUND_TRUTH>\nA\n</GROUND_TRUTH>"));

        let mut empty = rec.clone();
        empty.prediction = "  ".into();
        assert!(matches!(
            natural_language_loss(&empty, "A", &e, &mut tape),
            Err(TextGradError::Precondition(_))
        ));
    }

    #[test]
    fn gradient_kind_preconditions() {
        let (_, _, e) = engines(MockScript::new().catch_all("A"), scripted_backward());
        let mut tape = Tape::new();
        let mut p = PromptVariable::trainable("seed");
        let rec = forward(&item("1"), &fmt(), &p, &e, Stage::Forward, &mut tape).unwrap();
        let loss = natural_language_loss(&rec, "A", &e, &mut tape).unwrap();
        assert!(grad_response(&loss, &rec, "A", &e, &mut tape).is_ok());
        let wrong = TextualFeedback {
            kind: FeedbackKind::PromptGrad,
            ..loss.clone()
        };
        assert!(matches!(
            grad_response(&wrong, &rec, "A", &e, &mut tape),
            Err(TextGradError::Precondition(_))
        ));
        assert!(matches!(
            grad_prompt(&mut p, &rec, &loss, &e, &mut tape),
            Err(TextGradError::Precondition(_))
        ));
    }

    #[test]
    fn frozen_prompt_gets_no_gradient_and_cannot_step() {
        let (_, bb, e) = engines(MockScript::new().catch_all("A"), scripted_backward());
        let mut tape = Tape::new();
        let mut p = PromptVariable::new("seed", false);
        let rec = forward(&item("1"), &fmt(), &p, &e, Stage::Forward, &mut tape).unwrap();
        let loss = natural_language_loss(&rec, "A", &e, &mut tape).unwrap();
        let rg = grad_response(&loss, &rec, "A", &e, &mut tape).unwrap();
        let before = bb.call_count();
        assert_eq!(grad_prompt(&mut p, &rec, &rg, &e, &mut tape).unwrap(), None);
        assert_eq!(bb.call_count(), before);
        assert!(p.grads.is_empty());
        assert_eq!(p.warnings.len(), 1);
        assert!(matches!(
            tgd_step(&mut p, &e, 2000, &mut tape),
            Err(TextGradError::FrozenParameter)
        ));

        let out = backward_batch(&[item("1"), item("2")], &fmt(), &mut p, &e, &mut tape).unwrap();
        assert!(out.gradients.is_empty());
        assert!(p.grads.is_empty());
    }

    #[test]
    fn tgd_step_returns_candidate_and_clears_grads() {
        let backward = MockScript::new()
            .contains(Stage::TgdStep.marker().unwrap(), "T")
            .catch_all("feedback");
        let (_, bb, e) = engines(MockScript::new().catch_all("A"), backward);
        let mut tape = Tape::new();
        let mut p = PromptVariable::trainable("seed");
        assert!(matches!(
            tgd_step(&mut p, &e, 2000, &mut tape),
            Err(TextGradError::EmptyGradients)
        ));
        backward_batch(&[item("1")], &fmt(), &mut p, &e, &mut tape).unwrap();
        assert_eq!(p.grads.len(), 1);
        let cand = tgd_step(&mut p, &e, 2000, &mut tape).unwrap();
        assert_eq!(cand, "T");
        assert!(p.grads.is_empty());
        assert_eq!(p.text, "seed");
        let last = bb
            .calls()
            .last()
            .unwrap()
            .last_user_text()
            .unwrap()
            .to_owned();
        assert!(last.contains("<CURRENT_PROMPT>\nseed\n</CURRENT_PROMPT>"));
        assert!(last.contains("<FEEDBACK_1>\nfeedback\n</FEEDBACK_1>"));
    }

    #[test]
    fn tgd_step_rejects_oversized_and_empty_candidates() {
        let long = "x".repeat(2001);
        let backward = MockScript::new()
            .contains(Stage::TgdStep.marker().unwrap(), long.clone())
            .catch_all("fb");
        let (_, _, e) = engines(MockScript::new().catch_all("A"), backward);
        let mut p = PromptVariable::trainable("seed");
        let mut tape = Tape::new();
        backward_batch(&[item("1")], &fmt(), &mut p, &e, &mut tape).unwrap();
        assert!(matches!(
            tgd_step(&mut p, &e, 2000, &mut tape),
            Err(TextGradError::CandidateTooLong {
                len: 2001,
                max: 2000
            })
        ));
        assert!(p.grads.is_empty());

        let backward = MockScript::new()
            .contains(
                Stage::TgdStep.marker().unwrap(),
                "<IMPROVED_PROMPT> </IMPROVED_PROMPT>",
            )
            .catch_all("fb");
        let (_, _, e) = engines(MockScript::new().catch_all("A"), backward);
        backward_batch(&[item("1")], &fmt(), &mut p, &e, &mut tape).unwrap();
        assert!(matches!(
            tgd_step(&mut p, &e, 2000, &mut tape),
            Err(TextGradError::EmptyCandidate)
        ));
    }

    #[test]
    fn batch_of_three_accumulates_in_order() {
        let backward = MockScript::new()
            .contains(Stage::Loss.marker().unwrap(), "LOSS")
            .contains(Stage::ResponseGradient.marker().unwrap(), "RGRAD")
            .rule(
                MockMatcher::Contains(Stage::PromptGradient.marker().unwrap().into()),
                MockReply::func(|r| {
                    let text = r.last_user_text().unwrap();
                    let id = text
                        .split("Question ")
                        .nth(1)
                        .unwrap()
                        .split_whitespace()
                        .next()
                        .unwrap();
                    Ok(format!("PGRAD for {id}"))
                }),
            );
        let (tb, bb, e) = engines(MockScript::new().catch_all("A"), backward);
        let mut p = PromptVariable::trainable("seed");
        let mut tape = Tape::new();
        let items = [item("i1"), item("i2"), item("i3")];
        let out = backward_batch(&items, &fmt(), &mut p, &e, &mut tape).unwrap();
        let bodies: Vec<_> = p.grads.iter().map(|g| g.body.as_str()).collect();
        assert_eq!(bodies, ["PGRAD for i1", "PGRAD for i2", "PGRAD for i3"]);
        assert_eq!(out.gradients.len(), 3);
        assert_eq!(tb.call_count(), 3);
        assert_eq!(bb.call_count(), 9);
        // Tape is grouped per item, each in loss -> response -> prompt order.
        let stages: Vec<Stage> = tape.iter().map(|c| c.stage).collect();
        let per_item = [
            Stage::Forward,
            Stage::Loss,
            Stage::ResponseGradient,
            Stage::PromptGradient,
        ];
        assert_eq!(stages, per_item.repeat(3));
    }

    #[test]
    fn partial_batch_failure_is_collected() {
        let task = MockScript::new()
            .rule(
                MockMatcher::LastUserContains("Question bad".into()),
                MockReply::Fail(crate::gateway::MockFailure::Transient),
            )
            .catch_all("A");
        let (_, _, e) = engines(task, scripted_backward());
        let mut p = PromptVariable::trainable("seed");
        let items = [item("ok1"), item("bad"), item("ok2")];
        let out = backward_batch(&items, &fmt(), &mut p, &e, &mut Tape::new()).unwrap();
        assert_eq!(out.gradients.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].item_id, "bad");

        let all_bad = [item("bad")];
        assert!(matches!(
            backward_batch(&all_bad, &fmt(), &mut p, &e, &mut Tape::new()),
            Err(TextGradError::AllItemsFailed { .. })
        ));
        assert!(matches!(
            backward_batch(&[], &fmt(), &mut p, &e, &mut Tape::new()),
            Err(TextGradError::EmptyBatch)
        ));
    }

    #[test]
    fn batch_of_one_matches_single_item_pipeline() {
        let make = || engines(MockScript::new().catch_all("B"), scripted_backward());

        let (tb1, bb1, e1) = make();
        let mut p1 = PromptVariable::trainable("seed");
        let mut tape1 = Tape::new();
        let it = item("solo");
        let rec = forward(&it, &fmt(), &p1, &e1, Stage::Forward, &mut tape1).unwrap();
        let loss = natural_language_loss(&rec, &it.gold, &e1, &mut tape1).unwrap();
        let rg = grad_response(&loss, &rec, &it.gold, &e1, &mut tape1).unwrap();
        grad_prompt(&mut p1, &rec, &rg, &e1, &mut tape1).unwrap();

        let (tb2, bb2, e2) = make();
        let mut p2 = PromptVariable::trainable("seed");
        let mut tape2 = Tape::new();
        backward_batch(std::slice::from_ref(&it), &fmt(), &mut p2, &e2, &mut tape2).unwrap();

        assert_eq!(tb1.calls(), tb2.calls());
        assert_eq!(bb1.calls(), bb2.calls());
        assert_eq!(p1.grads, p2.grads);
        let strip = |t: &Tape| {
            t.iter()
                .map(|c| (c.stage, c.request_digest.clone(), c.response.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&tape1), strip(&tape2));
    }
}

//! Scripted, deterministic chat backend for offline runs and tests.
//!
//! A script is an ordered list of `(matcher, reply)` rules plus at most one
//! catch-all. The first matching rule in registration order answers; the
//! catch-all is tried last. Every request is logged.
//!
//! Script files are JSON, in either of two shapes:
//!
//! ```json
//! {"aortic": "yes", "*": "maybe"}
//! ```
//!
//! where each key is a substring matched against every message and `"*"` is
//! the catch-all, or the explicit form
//!
//! ```json
//! {"rules": [
//!   {"system_contains": "evidence-based", "reply": "A"},
//!   {"last_user_contains": "Q17", "reply": {"sequence": ["B", "C"]}},
//!   {"contains": "outage", "reply": {"fail": "transient"}},
//!   {"catch_all": true, "reply": "{{random:A|B|C|D}}"}
//! ]}
//! ```
//!
//! Text replies may contain `{{random:X|Y|...}}`, which picks one option
//! with a generator seeded by the request digest, so the choice is stable
//! for a given request and consistent with the response cache.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde_json::Value;

use super::{
    cache_key, BackendFailure, ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage,
};
use crate::sampling::{fnv1a64, SplitMix64};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockMatcher {
    /// Substring of any message's content.
    Contains(String),
    /// Substring of the leading system message.
    SystemContains(String),
    /// Substring of the final user message.
    LastUserContains(String),
    CatchAll,
}

impl MockMatcher {
    fn matches(&self, request: &ChatRequest) -> bool {
        match self {
            MockMatcher::Contains(s) => request.messages.iter().any(|m| m.content.contains(s)),
            MockMatcher::SystemContains(s) => request.system_text().is_some_and(|t| t.contains(s)),
            MockMatcher::LastUserContains(s) => {
                request.last_user_text().is_some_and(|t| t.contains(s))
            }
            MockMatcher::CatchAll => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFailure {
    Transient,
    Auth,
    Protocol,
}

pub type ReplyFn = dyn Fn(&ChatRequest) -> Result<String, BackendFailure> + Send + Sync;

#[derive(Clone)]
pub enum MockReply {
    /// Template text, see the module docs for placeholders.
    Text(String),
    /// Successive replies for successive matching calls; the last one repeats.
    Sequence(Vec<String>),
    Fail(MockFailure),
    /// Programmatic reply, for tests that need request-dependent behaviour.
    Func(Arc<ReplyFn>),
}

impl fmt::Debug for MockReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockReply::Text(t) => f.debug_tuple("Text").field(t).finish(),
            MockReply::Sequence(s) => f.debug_tuple("Sequence").field(s).finish(),
            MockReply::Fail(k) => f.debug_tuple("Fail").field(k).finish(),
            MockReply::Func(_) => f.write_str("Func(..)"),
        }
    }
}

impl MockReply {
    pub fn text(t: impl Into<String>) -> Self {
        MockReply::Text(t.into())
    }

    pub fn func<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendFailure> + Send + Sync + 'static,
    {
        MockReply::Func(Arc::new(f))
    }
}

/// Ordered rule list; turned into a [`MockBackend`] by [`MockBackend::new`].
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    rules: Vec<(MockMatcher, MockReply)>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, matcher: MockMatcher, reply: MockReply) -> Self {
        self.rules.push((matcher, reply));
        self
    }

    pub fn contains(self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rule(
            MockMatcher::Contains(needle.into()),
            MockReply::Text(reply.into()),
        )
    }

    pub fn catch_all(self, reply: impl Into<String>) -> Self {
        self.rule(MockMatcher::CatchAll, MockReply::Text(reply.into()))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn from_json(value: &Value) -> Result<Self, GatewayError> {
        let obj = value
            .as_object()
            .ok_or_else(|| GatewayError::Config("mock script must be a JSON object".into()))?;
        let mut script = MockScript::new();
        if let Some(rules) = obj.get("rules") {
            let rules = rules
                .as_array()
                .ok_or_else(|| GatewayError::Config("`rules` must be an array".into()))?;
            for (i, rule) in rules.iter().enumerate() {
                let (matcher, reply) = parse_rule(rule)
                    .map_err(|e| GatewayError::Config(format!("mock rule {i}: {e}")))?;
                script.rules.push((matcher, reply));
            }
        } else {
            for (key, reply) in obj {
                let matcher = if key == "*" {
                    MockMatcher::CatchAll
                } else {
                    MockMatcher::Contains(key.clone())
                };
                let reply = parse_reply(reply)
                    .map_err(|e| GatewayError::Config(format!("mock key {key:?}: {e}")))?;
                script.rules.push((matcher, reply));
            }
        }
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GatewayError::Config(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        let value: Value = serde_json::from_str(&text).map_err(|e| {
            GatewayError::Config(format!("mock script {} is not JSON: {e}", path.display()))
        })?;
        Self::from_json(&value)
    }
}

fn parse_rule(rule: &Value) -> Result<(MockMatcher, MockReply), String> {
    let obj = rule.as_object().ok_or("rule must be an object")?;
    let text_of = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_owned);
    let matcher = if obj.get("catch_all").and_then(Value::as_bool) == Some(true) {
        MockMatcher::CatchAll
    } else if let Some(s) = text_of("contains") {
        MockMatcher::Contains(s)
    } else if let Some(s) = text_of("system_contains") {
        MockMatcher::SystemContains(s)
    } else if let Some(s) = text_of("last_user_contains") {
        MockMatcher::LastUserContains(s)
    } else {
        return Err(
            "rule needs one of contains, system_contains, last_user_contains, catch_all".into(),
        );
    };
    let reply = parse_reply(obj.get("reply").ok_or("rule is missing `reply`")?)?;
    Ok((matcher, reply))
}

fn parse_reply(value: &Value) -> Result<MockReply, String> {
    match value {
        Value::String(s) => Ok(MockReply::Text(s.clone())),
        Value::Object(obj) => {
            if let Some(seq) = obj.get("sequence") {
                let items = seq
                    .as_array()
                    .ok_or("`sequence` must be an array")?
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(str::to_owned)
                            .ok_or("sequence items must be strings")
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if items.is_empty() {
                    return Err("`sequence` must not be empty".into());
                }
                Ok(MockReply::Sequence(items))
            } else if let Some(kind) = obj.get("fail") {
                match kind.as_str() {
                    Some("transient") => Ok(MockReply::Fail(MockFailure::Transient)),
                    Some("auth") => Ok(MockReply::Fail(MockFailure::Auth)),
                    Some("protocol") => Ok(MockReply::Fail(MockFailure::Protocol)),
                    _ => Err("`fail` must be transient, auth or protocol".into()),
                }
            } else {
                Err("reply object needs `sequence` or `fail`".into())
            }
        }
        _ => Err("reply must be a string or object".into()),
    }
}

struct Rule {
    matcher: MockMatcher,
    reply: MockReply,
    cursor: AtomicUsize,
}

pub struct MockBackend {
    rules: Vec<Rule>,
    log: Mutex<Vec<ChatRequest>>,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("rules", &self.rules.len())
            .field("calls", &self.call_count())
            .finish()
    }
}

impl MockBackend {
    /// Compiles a script; the catch-all, if any, moves to the end.
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        let mut catch_all = None;
        let mut rules = Vec::with_capacity(script.rules.len());
        for (matcher, reply) in script.rules {
            if matcher == MockMatcher::CatchAll {
                if catch_all.is_some() {
                    return Err(GatewayError::Config(
                        "mock script has more than one catch-all".into(),
                    ));
                }
                catch_all = Some(reply);
                continue;
            }
            rules.push(Rule {
                matcher,
                reply,
                cursor: AtomicUsize::new(0),
            });
        }
        if let Some(reply) = catch_all {
            rules.push(Rule {
                matcher: MockMatcher::CatchAll,
                reply,
                cursor: AtomicUsize::new(0),
            });
        }
        Ok(Self {
            rules,
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every request received, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log").len()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("mock log").clear();
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendFailure> {
        self.log.lock().expect("mock log").push(request.clone());
        let rule = self
            .rules
            .iter()
            .find(|r| r.matcher.matches(request))
            .ok_or_else(|| BackendFailure::Protocol("no mock rule matched the request".into()))?;
        let content = match &rule.reply {
            MockReply::Text(t) => expand_template(t, request),
            MockReply::Sequence(items) => {
                let i = rule
                    .cursor
                    .fetch_add(1, Ordering::SeqCst)
                    .min(items.len() - 1);
                expand_template(&items[i], request)
            }
            MockReply::Fail(MockFailure::Transient) => {
                return Err(BackendFailure::Transient(
                    "scripted transient failure".into(),
                ))
            }
            MockReply::Fail(MockFailure::Auth) => {
                return Err(BackendFailure::Auth("scripted auth failure".into()))
            }
            MockReply::Fail(MockFailure::Protocol) => {
                return Err(BackendFailure::Protocol("scripted protocol failure".into()))
            }
            MockReply::Func(f) => f(request)?,
        };
        let prompt_tokens = request
            .messages
            .iter()
            .map(|m| m.content.split_whitespace().count() as u64)
            .sum();
        let completion_tokens = content.split_whitespace().count() as u64;
        Ok(ChatResponse {
            content,
            model_id: request.model_id.clone(),
            usage: Usage {
                prompt_tokens,
                completion_tokens,
            },
            from_cache: false,
            refusal: None,
        })
    }
}

fn expand_template(template: &str, request: &ChatRequest) -> String {
    static RANDOM: std::sync::LazyLock<Regex> =
        std::sync::LazyLock::new(|| Regex::new(r"\{\{random:([^}]*)\}\}").expect("valid regex"));
    if !template.contains("{{") {
        return template.to_owned();
    }
    let mut rng = SplitMix64::new(fnv1a64(cache_key(request).as_bytes()));
    RANDOM
        .replace_all(template, |caps: &regex::Captures<'_>| {
            let options: Vec<&str> = caps[1].split('|').collect();
            options[rng.below(options.len() as u64) as usize].to_owned()
        })
        .into_owned()
}

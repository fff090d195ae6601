//! OpenAI-compatible `/chat/completions` backend.

use serde::Serialize;
use serde_json::Value;

use super::{
    BackendConfig, BackendFailure, ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage,
};

#[derive(Debug)]
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key_env: String,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl HttpBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| GatewayError::Config("http backend requires base_url".into()))?;
        let api_key_env = config
            .api_key_env
            .clone()
            .ok_or_else(|| GatewayError::Config("http backend requires api_key_env".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key_env,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendFailure> {
        let key = std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                BackendFailure::Auth(format!(
                    "environment variable {} is not set",
                    self.api_key_env
                ))
            })?;

        let body = WireRequest {
            model: &request.model_id,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        super::Role::System => "system",
                        super::Role::User => "user",
                        super::Role::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };

        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;

        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendFailure::Transient(format!("reading body: {e}")))?;

        match status {
            200..=299 => parse_completion(&text, &request.model_id),
            401 | 403 => Err(BackendFailure::Auth(format!(
                "status {status}: {}",
                snippet(&text)
            ))),
            429 | 500..=599 => Err(BackendFailure::Transient(format!(
                "status {status}: {}",
                snippet(&text)
            ))),
            _ => Err(BackendFailure::Rejected {
                status,
                body: snippet(&text),
            }),
        }
    }
}

fn snippet(text: &str) -> String {
    const MAX: usize = 300;
    match text.char_indices().nth(MAX) {
        Some((cut, _)) => format!("{}...", &text[..cut]),
        None => text.to_owned(),
    }
}

/// Reads `choices[0].message.content` (and usage, when present) from an
/// OpenAI-shaped response body.
pub(crate) fn parse_completion(
    body: &str,
    requested_model: &str,
) -> Result<ChatResponse, BackendFailure> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendFailure::Protocol(format!("body is not JSON: {e}")))?;
    let message = value
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendFailure::Protocol("missing choices[0].message".into()))?;
    let refusal = message
        .get("refusal")
        .and_then(Value::as_str)
        .map(str::to_owned);
    let content = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None if refusal.is_some() => String::new(),
        _ => {
            return Err(BackendFailure::Protocol(
                "choices[0].message.content is not a string".into(),
            ))
        }
    };
    if let Some(r) = &refusal {
        tracing::warn!("model refused: {r}");
    }
    let usage = value
        .get("usage")
        .map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u
                .get("completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        })
        .unwrap_or_default();
    let model_id = value
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or(requested_model)
        .to_owned();
    Ok(ChatResponse {
        content,
        model_id,
        usage,
        from_cache: false,
        refusal,
    })
}

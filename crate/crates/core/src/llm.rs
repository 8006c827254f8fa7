//! Chat-completion gateway.
//!
//! Everything that talks to a language model goes through [`ChatBackend`].
//! Two backends exist: [`HttpChatBackend`] for a remote chat-completions
//! endpoint and [`MockBackend`], a scripted double used by tests and the
//! offline benchmark.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_BASE_URL: &str = "LLM_BASE_URL";
pub const ENV_MODEL: &str = "LLM_MODEL";

pub const GENERATION_TEMPERATURE: f64 = 0.2;
pub const VALIDATION_TEMPERATURE: f64 = 0.0;

const MAX_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("authentication rejected by backend (status {0})")]
    AuthError(u16),
    #[error("mock script exhausted after {0} responses")]
    MockExhausted(usize),
    #[error("cannot parse mock script {path}: {message}")]
    ParseError { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl CompletionParams {
    pub fn generation() -> Self {
        Self {
            temperature: GENERATION_TEMPERATURE,
            max_tokens: None,
            seed: None,
        }
    }

    pub fn validation() -> Self {
        Self {
            temperature: VALIDATION_TEMPERATURE,
            ..Self::generation()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub backend: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<CompletionResult, LlmError>;
}

/// Shared precondition: at least one message, the first being the system prompt.
pub fn check_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    let first = messages
        .first()
        .ok_or_else(|| LlmError::InvalidRequest("empty message list".into()))?;
    if first.role != Role::System {
        return Err(LlmError::InvalidRequest(
            "first message must be the system prompt".into(),
        ));
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != Role::Assistant && m.content.trim().is_empty())
    {
        return Err(LlmError::InvalidRequest(format!(
            "{:?} message has empty content",
            m.role
        )));
    }
    Ok(())
}

/// Scripted response, optionally keyed by a tag searched for in the last
/// user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Plain(String),
    Tagged {
        text: String,
        #[serde(default)]
        tag: Option<String>,
    },
}

impl MockResponse {
    fn tag(&self) -> Option<&str> {
        match self {
            MockResponse::Plain(_) => None,
            MockResponse::Tagged { tag, .. } => tag.as_deref(),
        }
    }

    fn text(&self) -> &str {
        match self {
            MockResponse::Plain(t) | MockResponse::Tagged { text: t, .. } => t,
        }
    }
}

/// Mock script file: `{"responses": ["text", {"tag": "FEEDBACK#2", "text": ".."}]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub responses: Vec<MockResponse>,
}

impl MockScript {
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: texts.into_iter().map(|t| MockResponse::Plain(t.into())).collect(),
        }
    }

    pub fn push_tagged(&mut self, tag: impl Into<String>, text: impl Into<String>) {
        self.responses.push(MockResponse::Tagged {
            text: text.into(),
            tag: Some(tag.into()),
        });
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

pub fn load_mock_script(path: impl AsRef<Path>) -> Result<MockScript, LlmError> {
    let path = path.as_ref();
    let err = |message: String| LlmError::ParseError {
        path: path.display().to_string(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[derive(Debug)]
struct MockState {
    consumed: Vec<bool>,
    served: usize,
}

/// Deterministic backend replaying a [`MockScript`].
///
/// A response whose tag occurs in the last user message wins; otherwise the
/// next untagged response is consumed in order.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let consumed = vec![false; script.responses.len()];
        Self {
            script,
            state: Mutex::new(MockState { consumed, served: 0 }),
        }
    }

    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(MockScript::from_texts(texts))
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().unwrap();
        state.consumed.iter().filter(|c| !**c).count()
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, messages: &[ChatMessage], _params: &CompletionParams) -> Result<CompletionResult, LlmError> {
        check_messages(messages)?;
        let last_user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let mut state = self.state.lock().unwrap();
        let responses = &self.script.responses;
        let tagged = responses
            .iter()
            .enumerate()
            .find(|(i, r)| !state.consumed[*i] && r.tag().is_some_and(|t| last_user.contains(t)));
        let pick = tagged
            .or_else(|| {
                responses
                    .iter()
                    .enumerate()
                    .find(|(i, r)| !state.consumed[*i] && r.tag().is_none())
            })
            .map(|(i, _)| i);
        match pick {
            Some(i) => {
                state.consumed[i] = true;
                state.served += 1;
                Ok(CompletionResult {
                    text: responses[i].text().to_owned(),
                    backend: "mock".into(),
                    latency_ms: 0,
                    truncated: false,
                })
            }
            None => Err(LlmError::MockExhausted(state.served)),
        }
    }
}

/// Remote chat-completions backend (`POST {base_url}/chat/completions`).
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(120),
            backoff: Duration::from_millis(500),
        }
    }

    /// Build from `LLM_BASE_URL`, `LLM_MODEL` and `LLM_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| LlmError::BackendUnavailable(format!("{ENV_BASE_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "deepseek-chat".into());
        Ok(Self::new(base, model, std::env::var(ENV_API_KEY).ok()))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(CompletionResult),
    Transient(String),
    Fatal(LlmError),
}

impl HttpChatBackend {
    fn attempt(&self, body: &ChatRequest<'_>, started: Instant) -> Attempt {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        match status {
            401 | 403 => return Attempt::Fatal(LlmError::AuthError(status)),
            429 | 500..=599 => return Attempt::Transient(format!("HTTP {status}")),
            200..=299 => {}
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Attempt::Fatal(LlmError::BackendUnavailable(format!("HTTP {status}: {text}")));
            }
        }
        let parsed: ChatResponse = match resp.body_mut().read_json() {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(LlmError::BackendUnavailable(format!("malformed response: {e}"))),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Fatal(LlmError::BackendUnavailable("response has no choices".into()));
        };
        Attempt::Done(CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            backend: format!("http:{}", self.model),
            latency_ms: started.elapsed().as_millis() as u64,
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, messages: &[ChatMessage], params: &CompletionParams) -> Result<CompletionResult, LlmError> {
        check_messages(messages)?;
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
        };
        let started = Instant::now();
        let mut last = String::new();
        for retry in 0..=MAX_RETRIES {
            if retry > 0 {
                thread::sleep(self.backoff * 2u32.pow(retry - 1));
            }
            match self.attempt(&body, started) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => {
                    tracing::warn!(retry, error = %msg, "chat backend transient failure");
                    last = msg;
                }
            }
        }
        Err(LlmError::BackendUnavailable(format!(
            "{last} (after {MAX_RETRIES} retries)"
        )))
    }
}

/// First JSON object embedded anywhere in `text`.
pub fn find_json_object(text: &str) -> Option<serde_json::Value> {
    text.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(v @ serde_json::Value::Object(_))) => Some(v),
            _ => None,
        }
    })
}

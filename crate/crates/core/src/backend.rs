//! LLM backends: an OpenAI-compatible HTTP client, a scripted backend and a
//! replay backend. The latter two are fully deterministic.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{send_with_retry, RetryPolicy};
use crate::register::ContextText;

pub const ENV_LLM_URL: &str = "REGSEARCH_LLM_URL";
pub const ENV_LLM_MODEL: &str = "REGSEARCH_LLM_MODEL";
pub const ENV_LLM_API_KEY: &str = "REGSEARCH_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_output_tokens: u32,
    pub temperature: f32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_output_tokens: 2048,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub context: ContextText,
    pub token_count: usize,
    pub token_cap: usize,
    pub params: GenerationParams,
}

impl CompletionRequest {
    fn check_budget(&self) -> Result<(), BackendError> {
        if self.token_count > self.token_cap {
            Err(BackendError::OverBudget {
                tokens: self.token_count,
                cap: self.token_cap,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Request/response metadata for the trajectory log. Never holds credentials.
    pub exchange: Option<Value>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            exchange: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("backend exhausted after {served} responses")]
    BackendExhausted { served: usize },
    #[error("request is {tokens} tokens, over the {cap}-token cap")]
    OverBudget { tokens: usize, cap: usize },
    #[error("replay diverged at completion {index}: context differs from the recording at byte {offset}")]
    ReplayDivergence { index: usize, offset: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;
}

/// Returns canned responses in order; fails once they run out.
pub struct ScriptedBackend {
    responses: Mutex<(VecDeque<String>, usize)>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            responses: Mutex::new((responses.into_iter().map(Into::into).collect(), 0)),
        }
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().expect("scripted lock").0.len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        request.check_budget()?;
        let mut guard = self.responses.lock().expect("scripted lock");
        let (queue, served) = &mut *guard;
        match queue.pop_front() {
            Some(text) => {
                *served += 1;
                Ok(Completion::text(text))
            }
            None => Err(BackendError::BackendExhausted { served: *served }),
        }
    }
}

/// One recorded completion: what the model saw and what it returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCompletion {
    pub context: String,
    pub output: String,
}

/// Replays recorded outputs in order. In strict mode every request's
/// context must byte-equal the recorded context.
pub struct ReplayBackend {
    recorded: Vec<RecordedCompletion>,
    cursor: Mutex<usize>,
    strict: bool,
}

impl ReplayBackend {
    pub fn new(recorded: Vec<RecordedCompletion>, strict: bool) -> Self {
        ReplayBackend {
            recorded,
            cursor: Mutex::new(0),
            strict,
        }
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().expect("replay lock")
    }

    pub fn len(&self) -> usize {
        self.recorded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let mut cursor = self.cursor.lock().expect("replay lock");
        let index = *cursor;
        let rec = self
            .recorded
            .get(index)
            .ok_or(BackendError::BackendExhausted { served: index })?;
        if self.strict && rec.context != request.context.text {
            let offset = first_difference(&rec.context, &request.context.text);
            return Err(BackendError::ReplayDivergence { index, offset });
        }
        *cursor += 1;
        Ok(Completion::text(rec.output.clone()))
    }
}

fn first_difference(a: &str, b: &str) -> usize {
    a.bytes()
        .zip(b.bytes())
        .position(|(x, y)| x != y)
        .unwrap_or_else(|| a.len().min(b.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    /// Base URL (`.../v1`) or the full `/chat/completions` URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    ENV_LLM_API_KEY.to_string()
}

impl HttpChatConfig {
    /// Fills endpoint and model from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let get = |k: &str| {
            std::env::var(k).map_err(|_| BackendError::Config(format!("{k} is not set")))
        };
        Ok(HttpChatConfig {
            endpoint: get(ENV_LLM_URL)?,
            model: get(ENV_LLM_MODEL)?,
            api_key_env: default_key_env(),
            retry: RetryPolicy::default(),
        })
    }
}

/// OpenAI-compatible chat completions. The stage prompt is sent as the
/// system message and the rest of the context as a single user message.
pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(config: &HttpChatConfig) -> Self {
        let base = config.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        HttpChatBackend {
            url,
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            http: config.retry.client(),
            retry: config.retry,
        }
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.context.prompt().trim_end()},
                {"role": "user", "content": request.context.body()},
            ],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_output_tokens,
        });
        if !request.params.stop.is_empty() {
            body["stop"] = json!(request.params.stop);
        }
        body
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        request.check_budget()?;
        let body = self.body(request);
        let resp = send_with_retry(&self.retry, || {
            let req = self.http.post(&self.url).json(&body);
            match &self.api_key {
                Some(key) => req.bearer_auth(key),
                None => req,
            }
        })
        .map_err(BackendError::TransportError)?;
        let value: Value = resp
            .json()
            .map_err(|e| BackendError::TransportError(format!("invalid response body: {e}")))?;
        let choice = value.pointer("/choices/0");
        let text = choice
            .and_then(|c| c.pointer("/message/content"))
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::TransportError("response has no choices[0].message.content".into())
            })?;
        Ok(Completion {
            text: text.to_string(),
            exchange: Some(json!({
                "url": self.url,
                "model": self.model,
                "finish_reason": choice.and_then(|c| c.get("finish_reason")).cloned(),
                "usage": value.get("usage").cloned(),
            })),
        })
    }
}

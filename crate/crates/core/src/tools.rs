//! Tool registry and the clients executed on `tool_call`.
//!
//! Every executor returns a normalized [`ToolResult`]. Retrieval tools
//! return at most `top_k` documents, ranked best first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{send_with_retry, RetryPolicy};
use crate::protocol::ToolCallPayload;

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolResult {
    pub documents: Vec<Document>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Value>,
}

impl ToolResult {
    pub fn is_empty(&self) -> bool {
        self.documents.is_empty() && self.raw.is_none()
    }

    /// Text shown to the model on the turn after the call.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.is_empty() {
            out.push_str("(no documents returned)\n");
        }
        for (i, d) in self.documents.iter().enumerate() {
            let _ = writeln!(out, "[{}] {} ({})", i + 1, d.title.trim(), d.source_id);
            out.push_str(d.text.trim());
            out.push_str("\n\n");
        }
        if let Some(raw) = &self.raw {
            out.push_str(&raw.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("arguments for {tool:?} violate its schema: {detail}")]
    ArgumentSchemaViolation { tool: String, detail: String },
    #[error("tool {tool:?} failed: {detail}")]
    ToolTransportError { tool: String, detail: String },
    #[error("tool configuration: {0}")]
    Config(String),
}

impl ToolError {
    /// Errors the model can fix by emitting a different call.
    pub fn is_repromptable(&self) -> bool {
        matches!(
            self,
            ToolError::UnknownTool(_) | ToolError::ArgumentSchemaViolation { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgType {
    String,
    Integer,
    Number,
    Boolean,
}

impl ArgType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ArgType::String => v.is_string(),
            ArgType::Integer => v.is_i64() || v.is_u64(),
            ArgType::Number => v.is_number(),
            ArgType::Boolean => v.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ArgType,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_name: String,
    pub description: String,
    pub arguments: Vec<ArgSpec>,
}

impl ToolSpec {
    /// Spec for a `{query: string}` retrieval tool.
    pub fn search(name: &str, description: &str) -> Self {
        ToolSpec {
            tool_name: name.to_string(),
            description: description.to_string(),
            arguments: vec![ArgSpec {
                name: "query".into(),
                ty: ArgType::String,
                required: true,
            }],
        }
    }

    pub fn validate(&self, args: &Map<String, Value>) -> Result<(), ToolError> {
        let violation = |detail: String| ToolError::ArgumentSchemaViolation {
            tool: self.tool_name.clone(),
            detail,
        };
        for spec in &self.arguments {
            match args.get(&spec.name) {
                None if spec.required => {
                    return Err(violation(format!("missing required argument {:?}", spec.name)))
                }
                Some(v) if !spec.ty.accepts(v) => {
                    return Err(violation(format!(
                        "argument {:?} must be of type {:?}",
                        spec.name, spec.ty
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = args
            .keys()
            .find(|k| !self.arguments.iter().any(|a| &a.name == *k))
        {
            return Err(violation(format!("unexpected argument {extra:?}")));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let args: Vec<String> = self
            .arguments
            .iter()
            .map(|a| {
                let ty = serde_json::to_value(a.ty).unwrap_or_default();
                format!(
                    "{}: {}{}",
                    a.name,
                    ty.as_str().unwrap_or("any"),
                    if a.required { "" } else { " (optional)" }
                )
            })
            .collect();
        format!("{}({}) - {}", self.tool_name, args.join(", "), self.description)
    }
}

/// Executes validated tool arguments.
pub trait ToolExecutor: Send + Sync {
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError>;
}

impl<F> ToolExecutor for F
where
    F: Fn(&Map<String, Value>) -> Result<ToolResult, ToolError> + Send + Sync,
{
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError> {
        self(args)
    }
}

/// What the engine calls on `tool_call`.
pub trait ToolInvoker: Send + Sync {
    fn invoke(&self, call: &ToolCallPayload) -> Result<ToolResult, ToolError>;
    fn specs(&self) -> Vec<ToolSpec>;
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, (ToolSpec, Arc<dyn ToolExecutor>)>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_tool(
        mut self,
        spec: ToolSpec,
        executor: Arc<dyn ToolExecutor>,
    ) -> Result<Self, ToolError> {
        if self.tools.contains_key(&spec.tool_name) {
            return Err(ToolError::DuplicateTool(spec.tool_name));
        }
        self.tools.insert(spec.tool_name.clone(), (spec, executor));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Builds a registry from a tool config file. `top_k_override` replaces
    /// every tool's configured `top_k`.
    pub fn from_config_file(path: &Path, top_k_override: Option<usize>) -> Result<Self, ToolError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ToolError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ToolsConfig =
            toml::from_str(&text).map_err(|e| ToolError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.build(base, top_k_override)
    }
}

impl ToolInvoker for ToolRegistry {
    fn invoke(&self, call: &ToolCallPayload) -> Result<ToolResult, ToolError> {
        let (spec, exec) = self
            .tools
            .get(&call.tool_name)
            .ok_or_else(|| ToolError::UnknownTool(call.tool_name.clone()))?;
        spec.validate(&call.arguments)?;
        let result = exec.execute(&call.arguments)?;
        if result.is_empty() {
            log::warn!("tool {} returned no documents", call.tool_name);
        }
        Ok(result)
    }

    fn specs(&self) -> Vec<ToolSpec> {
        self.tools.values().map(|(s, _)| s.clone()).collect()
    }
}

/// Replays previously recorded tool results in order, ignoring arguments.
pub struct RecordedTools {
    specs: Vec<ToolSpec>,
    results: Mutex<std::collections::VecDeque<ToolResult>>,
}

impl RecordedTools {
    pub fn new(specs: Vec<ToolSpec>, results: Vec<ToolResult>) -> Self {
        RecordedTools {
            specs,
            results: Mutex::new(results.into()),
        }
    }
}

impl ToolInvoker for RecordedTools {
    fn invoke(&self, call: &ToolCallPayload) -> Result<ToolResult, ToolError> {
        self.results
            .lock()
            .expect("recorded tools lock")
            .pop_front()
            .ok_or_else(|| ToolError::ToolTransportError {
                tool: call.tool_name.clone(),
                detail: "no recorded result left to replay".into(),
            })
    }

    fn specs(&self) -> Vec<ToolSpec> {
        self.specs.clone()
    }
}

/// `<tool>:<first 12 hex chars of sha256(key)>`.
pub fn stable_source_id(tool: &str, key: &str) -> String {
    let digest = Sha256::digest(key.as_bytes());
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{tool}:{hex}")
}

fn query_arg(tool: &str, args: &Map<String, Value>) -> Result<String, ToolError> {
    args.get("query")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ToolError::ArgumentSchemaViolation {
            tool: tool.to_string(),
            detail: "missing required argument \"query\"".into(),
        })
}

fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Offline search over an in-memory corpus.
///
/// Score is the number of distinct query terms present in the document
/// title or text; ties keep corpus order. Always returns
/// `min(top_k, corpus size)` documents.
pub struct FixtureSearch {
    corpus: Vec<Document>,
    top_k: usize,
}

impl FixtureSearch {
    pub fn new(corpus: Vec<Document>, top_k: usize) -> Self {
        FixtureSearch { corpus, top_k }
    }

    /// Loads a JSONL corpus of `{source_id, title, text}` records.
    pub fn from_jsonl(path: &Path, top_k: usize) -> Result<Self, ToolError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ToolError::Config(format!("{}: {e}", path.display())))?;
        let corpus = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| {
                    ToolError::Config(format!("{}:{}: {e}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<Document>, _>>()?;
        Ok(Self::new(corpus, top_k))
    }

    pub fn search(&self, query: &str) -> Vec<Document> {
        let mut q = terms(query);
        q.sort();
        q.dedup();
        let mut scored: Vec<(usize, &Document)> = self
            .corpus
            .iter()
            .map(|d| {
                let doc_terms = terms(&format!("{} {}", d.title, d.text));
                (q.iter().filter(|t| doc_terms.contains(t)).count(), d)
            })
            .collect();
        scored.sort_by_key(|s| std::cmp::Reverse(s.0));
        scored
            .into_iter()
            .take(self.top_k)
            .map(|(_, d)| d.clone())
            .collect()
    }
}

impl ToolExecutor for FixtureSearch {
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError> {
        let query = query_arg("fixture", args)?;
        Ok(ToolResult {
            documents: self.search(&query),
            raw: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HttpMethod {
    Get,
    #[default]
    Post,
}

/// Field mapping for a generic "query -> ranked snippets" search API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebSearchConfig {
    pub endpoint: String,
    #[serde(default)]
    pub method: HttpMethod,
    #[serde(default = "default_query_param")]
    pub query_param: String,
    #[serde(default)]
    pub count_param: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_key_header")]
    pub api_key_header: String,
    /// JSON pointer to the result array, e.g. `/organic`.
    #[serde(default = "default_results_pointer")]
    pub results_pointer: String,
    #[serde(default = "default_title_field")]
    pub title_field: String,
    #[serde(default = "default_url_field")]
    pub url_field: String,
    #[serde(default = "default_snippet_field")]
    pub snippet_field: String,
}

fn default_query_param() -> String {
    "q".into()
}
fn default_key_header() -> String {
    "X-API-KEY".into()
}
fn default_results_pointer() -> String {
    "/results".into()
}
fn default_title_field() -> String {
    "title".into()
}
fn default_url_field() -> String {
    "url".into()
}
fn default_snippet_field() -> String {
    "snippet".into()
}

pub struct WebSearchClient {
    name: String,
    config: WebSearchConfig,
    api_key: Option<String>,
    top_k: usize,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl WebSearchClient {
    pub fn new(name: &str, config: WebSearchConfig, top_k: usize, retry: RetryPolicy) -> Self {
        let api_key = config
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        WebSearchClient {
            name: name.to_string(),
            config,
            api_key,
            top_k,
            http: retry.client(),
            retry,
        }
    }

    fn normalize(&self, body: &Value) -> Result<Vec<Document>, ToolError> {
        let items = body
            .pointer(&self.config.results_pointer)
            .and_then(Value::as_array)
            .ok_or_else(|| ToolError::ToolTransportError {
                tool: self.name.clone(),
                detail: format!("response has no array at {}", self.config.results_pointer),
            })?;
        let field = |item: &Value, key: &str| {
            item.get(key)
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string()
        };
        Ok(items
            .iter()
            .take(self.top_k)
            .map(|item| {
                let url = field(item, &self.config.url_field);
                let title = field(item, &self.config.title_field);
                let key = if url.is_empty() { &title } else { &url };
                Document {
                    source_id: stable_source_id(&self.name, key),
                    title,
                    text: field(item, &self.config.snippet_field),
                }
            })
            .collect())
    }
}

impl ToolExecutor for WebSearchClient {
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError> {
        let query = query_arg(&self.name, args)?;
        let cfg = &self.config;
        let resp = send_with_retry(&self.retry, || {
            let mut req = match cfg.method {
                HttpMethod::Get => {
                    let mut params = vec![(cfg.query_param.clone(), query.clone())];
                    if let Some(c) = &cfg.count_param {
                        params.push((c.clone(), self.top_k.to_string()));
                    }
                    self.http.get(&cfg.endpoint).query(&params)
                }
                HttpMethod::Post => {
                    let mut body = Map::new();
                    body.insert(cfg.query_param.clone(), json!(query));
                    if let Some(c) = &cfg.count_param {
                        body.insert(c.clone(), json!(self.top_k));
                    }
                    self.http.post(&cfg.endpoint).json(&body)
                }
            };
            if let Some(key) = &self.api_key {
                req = req.header(cfg.api_key_header.as_str(), key);
            }
            req
        })
        .map_err(|detail| ToolError::ToolTransportError {
            tool: self.name.clone(),
            detail,
        })?;
        let body: Value = resp.json().map_err(|e| ToolError::ToolTransportError {
            tool: self.name.clone(),
            detail: e.to_string(),
        })?;
        Ok(ToolResult {
            documents: self.normalize(&body)?,
            raw: None,
        })
    }
}

/// Client for a local dense-retrieval service.
///
/// Request: `{"queries": [q], "topk": k, "return_scores": true}`.
/// Response: `{"result": [[{"document": {"id", "contents"}, "score"}, ...]]}`
/// where `contents` is `"Title"\ntext`. A flat list of
/// `{id, title, text|contents, score}` objects is also accepted.
pub struct DenseRetrieverClient {
    name: String,
    endpoint: String,
    top_k: usize,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl DenseRetrieverClient {
    pub fn new(name: &str, endpoint: &str, top_k: usize, retry: RetryPolicy) -> Self {
        DenseRetrieverClient {
            name: name.to_string(),
            endpoint: endpoint.to_string(),
            top_k,
            http: retry.client(),
            retry,
        }
    }

    fn normalize(&self, body: &Value) -> Result<Vec<Document>, ToolError> {
        let bad = |detail: &str| ToolError::ToolTransportError {
            tool: self.name.clone(),
            detail: detail.to_string(),
        };
        let hits = match body.get("result").and_then(Value::as_array) {
            Some(per_query) => per_query
                .first()
                .and_then(Value::as_array)
                .ok_or_else(|| bad("result[0] is not an array"))?,
            None => body.as_array().ok_or_else(|| bad("unrecognized response shape"))?,
        };
        let mut scored: Vec<(f64, Document)> = hits
            .iter()
            .map(|hit| {
                let doc = hit.get("document").unwrap_or(hit);
                let id = match doc.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => String::new(),
                };
                let contents = doc
                    .get("contents")
                    .or_else(|| doc.get("text"))
                    .and_then(Value::as_str)
                    .unwrap_or_default();
                let (title, text) = match doc.get("title").and_then(Value::as_str) {
                    Some(t) => (t.to_string(), contents.to_string()),
                    None => split_title(contents),
                };
                let score = hit.get("score").and_then(Value::as_f64).unwrap_or(0.0);
                let key = if id.is_empty() { &text } else { &id };
                (
                    score,
                    Document {
                        source_id: stable_source_id(&self.name, key),
                        title,
                        text,
                    },
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(scored
            .into_iter()
            .take(self.top_k)
            .map(|(_, d)| d)
            .collect())
    }
}

fn split_title(contents: &str) -> (String, String) {
    match contents.split_once('\n') {
        Some((first, rest)) => (first.trim().trim_matches('"').to_string(), rest.trim().to_string()),
        None => (String::new(), contents.trim().to_string()),
    }
}

impl ToolExecutor for DenseRetrieverClient {
    fn execute(&self, args: &Map<String, Value>) -> Result<ToolResult, ToolError> {
        let query = query_arg(&self.name, args)?;
        let body = json!({"queries": [query], "topk": self.top_k, "return_scores": true});
        let resp = send_with_retry(&self.retry, || self.http.post(&self.endpoint).json(&body))
            .map_err(|detail| ToolError::ToolTransportError {
                tool: self.name.clone(),
                detail,
            })?;
        let value: Value = resp.json().map_err(|e| ToolError::ToolTransportError {
            tool: self.name.clone(),
            detail: e.to_string(),
        })?;
        Ok(ToolResult {
            documents: self.normalize(&value)?,
            raw: None,
        })
    }
}

/// Tool config file: a list of `[[tool]]` tables.
#[derive(Debug, Clone, Deserialize)]
pub struct ToolsConfig {
    #[serde(rename = "tool", default)]
    pub tools: Vec<ToolConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ToolConfig {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    #[serde(flatten)]
    pub kind: ToolKindConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolKindConfig {
    Fixture { corpus: PathBuf },
    WebSearch(WebSearchConfig),
    DenseRetriever { endpoint: String },
}

impl ToolsConfig {
    pub fn build(&self, base_dir: &Path, top_k_override: Option<usize>) -> Result<ToolRegistry, ToolError> {
        let mut registry = ToolRegistry::new();
        for t in &self.tools {
            let top_k = top_k_override.or(t.top_k).unwrap_or(DEFAULT_TOP_K);
            let retry = t.retry.unwrap_or_default();
            let (default_desc, exec): (&str, Arc<dyn ToolExecutor>) = match &t.kind {
                ToolKindConfig::Fixture { corpus } => {
                    let path = if corpus.is_absolute() {
                        corpus.clone()
                    } else {
                        base_dir.join(corpus)
                    };
                    (
                        "search the local corpus",
                        Arc::new(FixtureSearch::from_jsonl(&path, top_k)?),
                    )
                }
                ToolKindConfig::WebSearch(cfg) => (
                    "search the web; returns ranked snippets",
                    Arc::new(WebSearchClient::new(&t.name, cfg.clone(), top_k, retry)),
                ),
                ToolKindConfig::DenseRetriever { endpoint } => (
                    "retrieve Wikipedia passages",
                    Arc::new(DenseRetrieverClient::new(&t.name, endpoint, top_k, retry)),
                ),
            };
            let desc = t.description.as_deref().unwrap_or(default_desc);
            registry = registry.register_tool(ToolSpec::search(&t.name, desc), exec)?;
        }
        Ok(registry)
    }
}

//! Chat-completion access for both pipeline steps: request/response types,
//! an OpenAI-compatible HTTP backend, a digest-keyed replay store, and the
//! prompt templates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ToolDoc;
use crate::http::{HttpError, JsonClient, RetryPolicy};
use crate::kg::KnowledgeGraph;

pub const LLM_API_KEY_VAR: &str = "KGETOOL_LLM_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("endpoint error: {0}")]
    Endpoint(String),
    #[error("no recorded response for request digest {0}")]
    ReplayMiss(String),
    #[error("replay store {path}: {message}")]
    ReplayStore { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools: Option<Vec<ToolDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            tools: None,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => Err(LlmError::InvalidRequest("messages must not be empty")),
            Some(m) if m.role == Role::Assistant => Err(LlmError::InvalidRequest(
                "first message must be a system or user message",
            )),
            Some(_) => Ok(()),
        }
    }

    /// SHA-256 over model, messages, temperature and tools.
    pub fn digest(&self) -> String {
        let key = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "tools": self.tools,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    /// Body for `POST {base_url}/chat/completions`.
    pub fn wire_body(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(tools) = &self.tools {
            body["tools"] = tools
                .iter()
                .map(|t| json!({"type": "function", "function": t.to_schema()}))
                .collect();
        }
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NativeToolCall {
    pub name: String,
    /// Argument object as JSON text, as endpoints deliver it.
    pub arguments: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub native_tool_calls: Vec<NativeToolCall>,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }

    /// Parses an OpenAI-style chat completion body.
    pub fn from_wire(body: &Value) -> Result<Self, LlmError> {
        if let Some(err) = body.get("error") {
            return Err(LlmError::Endpoint(err.to_string()));
        }
        let message = body
            .pointer("/choices/0/message")
            .ok_or_else(|| LlmError::Endpoint(format!("response has no choices: {body}")))?;
        let text = message
            .get("content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let native_tool_calls = message
            .get("tool_calls")
            .and_then(Value::as_array)
            .map(|calls| {
                calls
                    .iter()
                    .filter_map(|c| {
                        let f = c.get("function").unwrap_or(c);
                        let name = f.get("name")?.as_str()?.to_string();
                        let arguments = match f.get("arguments") {
                            Some(Value::String(s)) => s.clone(),
                            Some(other) => other.to_string(),
                            None => "{}".to_string(),
                        };
                        Some(NativeToolCall { name, arguments })
                    })
                    .collect()
            })
            .unwrap_or_default();
        let usage = Usage {
            prompt_tokens: body
                .pointer("/usage/prompt_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
            completion_tokens: body
                .pointer("/usage/completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        };
        let resp = Self {
            text,
            native_tool_calls,
            usage,
        };
        if resp.text.is_empty() && resp.native_tool_calls.is_empty() {
            return Err(LlmError::Endpoint(
                "response carries neither text nor tool calls".into(),
            ));
        }
        Ok(resp)
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// OpenAI-compatible `POST {base_url}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    url: String,
    client: JsonClient,
}

impl HttpChatBackend {
    pub fn new(base_url: &str, client: JsonClient) -> Self {
        Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            client,
        }
    }

    pub fn from_env(base_url: &str, policy: RetryPolicy) -> Self {
        Self::new(base_url, JsonClient::from_env(LLM_API_KEY_VAR, policy))
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = self.client.post_json(&self.url, &request.wire_body())?;
        ChatResponse::from_wire(&body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub digest: String,
    pub response: ChatResponse,
}

pub fn read_replay_store(path: &Path) -> Result<Vec<ReplayRecord>, LlmError> {
    let store_err = |message: String| LlmError::ReplayStore {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| store_err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| store_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReplayRecord =
            serde_json::from_str(&line).map_err(|e| store_err(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Closed-world playback: unknown digests are errors, never live calls.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, ChatResponse>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        Self {
            responses: records
                .into_iter()
                .map(|r| (r.digest, r.response))
                .collect(),
        }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_records(read_replay_store(path)?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let digest = request.digest();
        self.responses
            .get(&digest)
            .cloned()
            .ok_or(LlmError::ReplayMiss(digest))
    }
}

/// Forwards to `inner` and appends each new `(digest, response)` pair to a
/// JSON-lines store. Writes are serialized.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    path: PathBuf,
    sink: Arc<Mutex<(File, HashSet<String>)>>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn ChatBackend>, path: &Path) -> Result<Self, LlmError> {
        let known = if path.exists() {
            read_replay_store(path)?
                .into_iter()
                .map(|r| r.digest)
                .collect()
        } else {
            HashSet::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::ReplayStore {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            sink: Arc::new(Mutex::new((file, known))),
        })
    }

    /// A recorder for another backend that appends to the same store.
    pub fn sibling(&self, inner: Arc<dyn ChatBackend>) -> Self {
        Self {
            inner,
            path: self.path.clone(),
            sink: Arc::clone(&self.sink),
        }
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let response = self.inner.complete(request)?;
        let record = ReplayRecord {
            digest: request.digest(),
            response: response.clone(),
        };
        let mut sink = self.sink.lock().expect("replay sink lock");
        if sink.1.insert(record.digest.clone()) {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(sink.0, "{line}").map_err(|e| LlmError::ReplayStore {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(response)
    }
}

/// Answers with the response whose needle is the longest substring found in
/// the request's message contents. Used for offline mocks.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: Vec<(String, ChatResponse)>,
}

impl ScriptedBackend {
    pub fn new(script: impl IntoIterator<Item = (String, ChatResponse)>) -> Self {
        Self {
            script: script.into_iter().collect(),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let haystack: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.script
            .iter()
            .filter(|(needle, _)| haystack.contains(needle.as_str()))
            .max_by_key(|(needle, _)| needle.len())
            .map(|(_, r)| r.clone())
            .ok_or_else(|| LlmError::Endpoint("scripted backend has no matching entry".into()))
    }
}

struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.available.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore wait");
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore lock") += 1;
        self.0.freed.notify_one();
    }
}

/// A backend plus a cap on concurrent in-flight requests.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limit: Arc<Semaphore>,
}

impl Gateway {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

    pub fn new(backend: Arc<dyn ChatBackend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            limit: Arc::new(Semaphore {
                available: Mutex::new(max_in_flight.max(1)),
                freed: Condvar::new(),
            }),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let _permit = self.limit.acquire();
        self.backend.complete(request)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("placeholder {{{0}}} was not filled")]
    Unfilled(String),
    #[error("template {template} lacks required placeholder {{{placeholder}}}")]
    MissingPlaceholder {
        template: String,
        placeholder: &'static str,
    },
    #[error("query is empty")]
    EmptyQuery,
    #[error("no candidate tools")]
    NoTools,
}

/// Text with `{name}` placeholders (`name` in `[a-z_]`); `{{` and `}}` are
/// literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
}

enum Segment<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn segments(body: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(i) = rest.find(['{', '}']) {
        if i > 0 {
            out.push(Segment::Text(&rest[..i]));
        }
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push(Segment::Brace(tail.as_bytes()[0] as char));
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                if !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                    out.push(Segment::Slot(name));
                    rest = &tail[end + 1..];
                    continue;
                }
            }
        }
        out.push(Segment::Brace(tail.as_bytes()[0] as char));
        rest = &tail[1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            body: body.into(),
        }
    }

    pub fn default_path() -> Self {
        Self::new("path_generation", include_str!("../assets/path_prompt.txt"))
    }

    pub fn default_tool() -> Self {
        Self::new("tool_use", include_str!("../assets/tool_prompt.txt"))
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        segments(&self.body)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.body.len());
        for seg in segments(&self.body) {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Brace(c) => out.push(c),
                Segment::Slot(name) => out.push_str(
                    values
                        .get(name)
                        .ok_or_else(|| PromptError::Unfilled(name.to_string()))?,
                ),
            }
        }
        Ok(out)
    }

    fn require(&self, placeholder: &'static str) -> Result<(), PromptError> {
        if self.placeholders().contains(placeholder) {
            Ok(())
        } else {
            Err(PromptError::MissingPlaceholder {
                template: self.id.clone(),
                placeholder,
            })
        }
    }
}

/// Extraction-step prompt: the sorted relation vocabulary and the request.
pub fn render_path_prompt(
    kg: &KnowledgeGraph,
    query: &str,
    template: &PromptTemplate,
) -> Result<Vec<ChatMessage>, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    template.require("relations")?;
    template.require("query")?;
    let relations: Vec<&str> = kg.relation_vocab().iter().map(String::as_str).collect();
    let values = BTreeMap::from([
        ("relations", relations.join(", ")),
        ("query", query.to_string()),
    ]);
    Ok(vec![ChatMessage::user(template.render(&values)?)])
}

/// Tool-use prompt: one JSON tool document per line, then the (augmented)
/// request.
pub fn render_tool_prompt(
    query: &str,
    tools: &[ToolDoc],
    template: &PromptTemplate,
) -> Result<Vec<ChatMessage>, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    if tools.is_empty() {
        return Err(PromptError::NoTools);
    }
    template.require("tools")?;
    template.require("query")?;
    let listing: Vec<String> = tools.iter().map(|t| t.to_schema().to_string()).collect();
    let values = BTreeMap::from([("tools", listing.join("\n")), ("query", query.to_string())]);
    Ok(vec![ChatMessage::user(template.render(&values)?)])
}

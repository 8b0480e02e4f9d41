//! Completion backends: an OpenAI-compatible HTTP client and a scripted tape
//! for deterministic runs.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId {
    pub name: String,
    /// Endpoint profile, e.g. `scripted` or the model name behind an endpoint.
    pub profile: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    /// Assistant text the completion continues from.
    pub prefill: Option<String>,
    pub stop_sequences: Vec<String>,
    pub max_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(messages: Vec<Message>, max_tokens: u32) -> Self {
        Self {
            messages,
            prefill: None,
            stop_sequences: Vec::new(),
            max_tokens,
            temperature: 0.0,
            seed: None,
        }
    }

    /// All request text, used by tape matchers.
    pub fn content(&self) -> String {
        let mut out: Vec<&str> = self.messages.iter().map(|m| m.content.as_str()).collect();
        if let Some(p) = &self.prefill {
            out.push(p);
        }
        out.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Finish {
    /// Generation stopped on this stop sequence, which ends `text`.
    StopSequence(String),
    Length,
    Natural,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionChunk {
    pub text: String,
    pub token_count: u64,
    pub finish: Finish,
}

impl CompletionChunk {
    pub fn error(message: impl Into<String>) -> Self {
        Self {
            text: String::new(),
            token_count: 0,
            finish: Finish::Error(message.into()),
        }
    }
}

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &BackendId;
    fn complete(&self, req: &CompletionRequest) -> CompletionChunk;
}

/// Token estimate for backends that report no usage: whitespace-delimited
/// words times 1.3, rounded up.
pub fn approx_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    (words * 13).div_ceil(10)
}

/// Cuts `text` right after the earliest stop sequence, keeping the match.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> (&'a str, Option<String>) {
    let hit = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()).map(|at| (at, s)))
        .min_by_key(|(at, s)| (*at, std::cmp::Reverse(s.len())));
    match hit {
        Some((at, s)) => (&text[..at + s.len()], Some(s.clone())),
        None => (text, None),
    }
}

/// Longest prefix of whole words whose estimate fits in `max_tokens`.
fn truncate_to_tokens(text: &str, max_tokens: u64) -> &str {
    let max_words = (max_tokens * 10 / 13) as usize;
    if max_words == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == max_words {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}

/// Applies the request's stop sequences and token limit to raw text, the way
/// a provider would.
pub fn finish_text(raw: &str, req: &CompletionRequest) -> CompletionChunk {
    let (text, stop) = truncate_at_stop(raw, &req.stop_sequences);
    let max = u64::from(req.max_tokens);
    if approx_tokens(text) > max {
        let cut = truncate_to_tokens(text, max);
        return CompletionChunk {
            text: cut.to_string(),
            token_count: approx_tokens(cut),
            finish: Finish::Length,
        };
    }
    CompletionChunk {
        text: text.to_string(),
        token_count: approx_tokens(text),
        finish: stop.map_or(Finish::Natural, Finish::StopSequence),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeEntry {
    #[serde(default)]
    pub response: String,
    /// Substring of the request content that selects this entry.
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<String>,
    /// Replay a backend failure instead of text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Never consumed; the entry answers every request it matches.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repeat: bool,
}

impl TapeEntry {
    pub fn text(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            matcher: None,
            error: None,
            repeat: false,
        }
    }

    pub fn matching(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            matcher: Some(matcher.into()),
            error: None,
            repeat: false,
        }
    }

    pub fn repeating(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            repeat: true,
            ..Self::matching(matcher, response)
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            response: String::new(),
            matcher: None,
            error: Some(message.into()),
            repeat: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("cannot read tape {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid tape {path}: {message}")]
    Format { path: String, message: String },
    #[error("tape is empty")]
    Empty,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum TapeItem {
    Text(String),
    Entry(TapeEntry),
}

/// Parses a tape file.
///
/// `.json` files hold an array of strings or
/// `{"response", "match", "error", "repeat"}` objects. Any other file is plain text with entries separated by lines
/// containing only `---`; an entry may begin with `@match <substring>` and
/// `@repeat`, or consist of `@error <message>`.
pub fn load_tape(path: &Path) -> Result<Vec<TapeEntry>, TapeError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| TapeError::Io {
        path: shown.clone(),
        source,
    })?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let entries = if is_json {
        let items: Vec<TapeItem> = serde_json::from_str(&text).map_err(|e| TapeError::Format {
            path: shown,
            message: e.to_string(),
        })?;
        items
            .into_iter()
            .map(|item| match item {
                TapeItem::Text(t) => TapeEntry::text(t),
                TapeItem::Entry(e) => e,
            })
            .collect()
    } else {
        parse_text_tape(&text)
    };
    if entries.is_empty() {
        return Err(TapeError::Empty);
    }
    Ok(entries)
}

pub fn parse_text_tape(text: &str) -> Vec<TapeEntry> {
    let mut entries = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut flush = |lines: &mut Vec<&str>| {
        if lines.iter().all(|l| l.trim().is_empty()) {
            lines.clear();
            return;
        }
        let mut entry = TapeEntry::text("");
        let mut body = lines.as_slice();
        while let Some(first) = body.first() {
            if let Some(m) = first.strip_prefix("@match ") {
                entry.matcher = Some(m.to_string());
            } else if let Some(e) = first.strip_prefix("@error ") {
                entry.error = Some(e.to_string());
            } else if first.trim_end() == "@repeat" {
                entry.repeat = true;
            } else {
                break;
            }
            body = &body[1..];
        }
        entry.response = body.join("\n").trim_matches('\n').to_string();
        entries.push(entry);
        lines.clear();
    };
    for line in text.lines() {
        if line.trim_end() == "---" {
            flush(&mut current);
        } else {
            current.push(line);
        }
    }
    flush(&mut current);
    entries
}

#[derive(Debug)]
struct TapeState {
    entries: Vec<TapeEntry>,
    consumed: Vec<bool>,
}

/// Replays canned responses. Entries with a matcher are used when their
/// substring occurs in the request; the rest are consumed in order.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: BackendId,
    state: Mutex<TapeState>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, entries: Vec<TapeEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        Self {
            id: BackendId {
                name: name.into(),
                profile: "scripted".into(),
            },
            state: Mutex::new(TapeState { entries, consumed }),
        }
    }

    pub fn from_texts<S: Into<String>>(name: impl Into<String>, texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(name, texts.into_iter().map(TapeEntry::text).collect())
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        state.consumed.iter().filter(|c| !**c).count()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> CompletionChunk {
        let content = req.content();
        let entry = {
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            let pick = state
                .entries
                .iter()
                .enumerate()
                .position(|(i, e)| {
                    !state.consumed[i]
                        && e.matcher.as_deref().is_some_and(|m| content.contains(m))
                })
                .or_else(|| {
                    state
                        .entries
                        .iter()
                        .enumerate()
                        .position(|(i, e)| !state.consumed[i] && e.matcher.is_none())
                });
            match pick {
                Some(i) => {
                    if !state.entries[i].repeat {
                        state.consumed[i] = true;
                    }
                    state.entries[i].clone()
                }
                None => return CompletionChunk::error(format!("scripted tape `{}` exhausted", self.id.name)),
            }
        };
        match entry.error {
            Some(msg) => CompletionChunk::error(msg),
            None => finish_text(&entry.response, req),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Base URL including the API version prefix, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    /// Whether the endpoint continues a trailing assistant message.
    pub supports_prefill: bool,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Extra fields merged into every request body.
    pub extra_body: serde_json::Map<String, serde_json::Value>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key: None,
            supports_prefill: false,
            timeout_secs: 600,
            max_retries: 3,
            backoff_ms: 1000,
            extra_body: serde_json::Map::new(),
        }
    }
}

/// Name of the environment variable holding the credential for `backend`.
pub fn api_key_var(backend: &str) -> String {
    let suffix: String = backend
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("RAISE_API_KEY_{suffix}")
}

#[derive(Debug, Error)]
pub enum BackendConfigError {
    #[error("backend `{0}`: cannot build HTTP client: {1}")]
    Client(String, String),
    #[error("backend `{0}`: model name is empty")]
    NoModel(String),
}

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct HttpBackend {
    id: BackendId,
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.id)
            .field("base_url", &self.config.base_url)
            .field("has_api_key", &self.config.api_key.is_some())
            .finish()
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessageOut,
    finish_reason: Option<String>,
    /// vLLM reports the matched stop string here.
    stop_reason: Option<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct ChatMessageOut {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    completion_tokens: Option<u64>,
}

enum Attempt {
    Done(CompletionChunk),
    Retry(String),
}

impl HttpBackend {
    pub fn new(name: impl Into<String>, config: HttpBackendConfig) -> Result<Self, BackendConfigError> {
        let name = name.into();
        if config.model.trim().is_empty() {
            return Err(BackendConfigError::NoModel(name));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendConfigError::Client(name.clone(), e.to_string()))?;
        Ok(Self {
            id: BackendId {
                name,
                profile: config.model.clone(),
            },
            config,
            client,
        })
    }

    pub fn request_body(&self, req: &CompletionRequest) -> serde_json::Value {
        let mut messages: Vec<serde_json::Value> = req
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        if let Some(prefill) = req.prefill.as_deref().filter(|p| !p.is_empty()) {
            if self.config.supports_prefill {
                messages.push(json!({"role": "assistant", "content": prefill}));
            } else if let Some(last) = messages.last_mut() {
                let content = last["content"].as_str().unwrap_or_default();
                last["content"] = json!(format!("{content}\n\n{prefill}"));
            }
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        if let Some(obj) = body.as_object_mut() {
            for (k, v) in &self.config.extra_body {
                obj.insert(k.clone(), v.clone());
            }
        }
        body
    }

    fn attempt(&self, url: &str, body: &serde_json::Value, req: &CompletionRequest) -> Attempt {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport error: {e}")),
        };
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Done(CompletionChunk::error(format!(
                "backend `{}`: authentication failed (HTTP {status}); set {}",
                self.id.name,
                api_key_var(&self.id.name)
            )));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading response: {e}")),
        };
        if !status.is_success() {
            return Attempt::Done(CompletionChunk::error(format!(
                "backend `{}`: HTTP {status}: {}",
                self.id.name,
                text.chars().take(500).collect::<String>()
            )));
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => {
                return Attempt::Done(CompletionChunk::error(format!(
                    "backend `{}`: unexpected response: {e}",
                    self.id.name
                )))
            }
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Done(CompletionChunk::error(format!(
                "backend `{}`: response has no choices",
                self.id.name
            )));
        };
        let mut content = choice.message.content.unwrap_or_default();
        let reported = parsed.usage.and_then(|u| u.completion_tokens);
        let finish = match choice.finish_reason.as_deref() {
            Some("length") => Finish::Length,
            Some("stop") => match choice.stop_reason.as_ref().and_then(|v| v.as_str()) {
                Some(s) if req.stop_sequences.iter().any(|x| x == s) => {
                    content.push_str(s);
                    Finish::StopSequence(s.to_string())
                }
                _ => Finish::Natural,
            },
            _ => Finish::Natural,
        };
        // Providers may ignore stop sequences; enforce them locally.
        let (cut, hit) = truncate_at_stop(&content, &req.stop_sequences);
        let (text, finish) = match hit {
            Some(s) if cut.len() < content.len() || finish == Finish::Natural => {
                (cut.to_string(), Finish::StopSequence(s))
            }
            _ => (content.clone(), finish),
        };
        Attempt::Done(CompletionChunk {
            token_count: reported.unwrap_or_else(|| approx_tokens(&text)),
            text,
            finish,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> CompletionChunk {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.request_body(req);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                debug!("backend {}: retry {attempt} in {delay} ms", self.id.name);
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&url, &body, req) {
                Attempt::Done(chunk) => return chunk,
                Attempt::Retry(msg) => {
                    warn!("backend {}: {msg}", self.id.name);
                    last_error = msg;
                }
            }
        }
        CompletionChunk::error(format!(
            "backend `{}` failed after {} retries: {last_error}",
            self.id.name, self.config.max_retries
        ))
    }
}

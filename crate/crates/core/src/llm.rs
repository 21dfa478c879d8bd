//! Text-generation gateway: canonical request digests, a JSON-lines
//! record/replay store, scripted mocks, a live chat-completion client and
//! bounded-concurrency batching.
//!
//! Every model call in the pipeline goes through [`Gateway::complete`]. The
//! gateway runs in one of three modes:
//!
//! * direct: forward to a provider (live HTTP or [`ScriptedMock`]);
//! * replay: answer only from a [`ReplayStore`], failing with
//!   [`LlmError::CacheMiss`] on anything not recorded;
//! * record: serve from the store when possible, otherwise call the provider
//!   and append the exchange.
//!
//! The store is keyed by [`LlmRequest::cache_key`], a SHA-256 digest of the
//! canonical request, so reordering pipeline stages never invalidates it.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const API_KEY_ENV: &str = "DALK_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("replay store has no entry for {0}")]
    CacheMiss(String),
    #[error("transport error (status {status}): {body}")]
    TransportError { status: u16, body: String },
    #[error("rate limited after retries")]
    RateLimited,
    #[error("no scripted rule matches {tag} prompt: {preview:?}")]
    UnmatchedPrompt { tag: String, preview: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay store: {0}")]
    Store(String),
    #[error("unexpected provider response: {0}")]
    Decode(String),
}

/// One single-turn generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub system_prompt: Option<String>,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Pipeline stage label. Not part of the cache key.
    pub tag: String,
}

impl LlmRequest {
    pub fn new(tag: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        LlmRequest {
            model: DEFAULT_MODEL.to_string(),
            system_prompt: None,
            user_prompt: user_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn with_settings(mut self, settings: &GenerationSettings) -> Self {
        self.model = settings.model.clone();
        self.temperature = settings.temperature;
        self.max_tokens = settings.max_tokens;
        self.system_prompt = settings.system_prompt.clone();
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty user prompt".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Canonical form: a JSON object with lexicographically sorted keys over
    /// (max_tokens, model, system_prompt, temperature, user_prompt).
    pub fn canonical_json(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("max_tokens", serde_json::json!(self.max_tokens));
        m.insert("model", serde_json::json!(self.model));
        m.insert("system_prompt", serde_json::json!(self.system_prompt));
        m.insert("temperature", serde_json::json!(self.temperature));
        m.insert("user_prompt", serde_json::json!(self.user_prompt));
        serde_json::to_string(&m).expect("string map serializes")
    }

    /// 64-hex-digit SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn cache_key(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Model identity and sampling parameters applied to every built request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub system_prompt: Option<String>,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            model: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            system_prompt: None,
        }
    }
}

/// A recorded request/response pair; one line of the replay store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub request: LlmRequest,
    pub response_text: String,
    pub cache_key: String,
    pub timestamp: DateTime<Utc>,
    pub provider_name: String,
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

// ---------------------------------------------------------------------------
// Scripted mock

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Restricts the rule to one pipeline stage when set.
    #[serde(default)]
    pub tag: Option<String>,
    /// Every pattern must occur in the prompt (system + user text).
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

/// Ordered substring rules; the first matching rule answers. A prompt that
/// matches nothing is an error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedMock {
    script: MockScript,
}

impl ScriptedMock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: MockScript) -> Self {
        ScriptedMock { script }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::from_script(serde_json::from_str(json)?))
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Adds a rule matching `pattern` in any stage.
    pub fn rule(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.script.rules.push(MockRule {
            tag: None,
            contains: vec![pattern.into()],
            response: response.into(),
        });
        self
    }

    /// Adds a rule restricted to `tag`; an empty pattern list matches every
    /// prompt of that stage.
    pub fn tagged_rule<I, S>(mut self, tag: &str, patterns: I, response: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.script.rules.push(MockRule {
            tag: Some(tag.to_string()),
            contains: patterns.into_iter().map(Into::into).collect(),
            response: response.into(),
        });
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

impl LlmProvider for ScriptedMock {
    fn name(&self) -> &str {
        "scripted-mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let system = request.system_prompt.as_deref().unwrap_or("");
        for rule in &self.script.rules {
            if rule.tag.as_ref().is_some_and(|t| *t != request.tag) {
                continue;
            }
            let hit = rule
                .contains
                .iter()
                .all(|p| request.user_prompt.contains(p.as_str()) || system.contains(p.as_str()));
            if hit {
                return Ok(rule.response.clone());
            }
        }
        Err(LlmError::UnmatchedPrompt {
            tag: request.tag.clone(),
            preview: request.user_prompt.chars().take(120).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Replay store

/// Append-only JSON-lines store of [`LlmExchange`]s. The first record for a
/// key wins on load.
pub struct ReplayStore {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, LlmExchange>>,
    writer: Mutex<Option<File>>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        ReplayStore {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (creating if absent) a store file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| LlmError::Store(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| LlmError::Store(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let ex: LlmExchange =
                    serde_json::from_str(&line).map_err(|e| LlmError::Store(format!("line {}: {e}", i + 1)))?;
                entries.entry(ex.cache_key.clone()).or_insert(ex);
            }
        }
        Ok(ReplayStore {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<LlmExchange> {
        self.entries.read().expect("store lock").get(key).cloned()
    }

    /// Records an exchange unless its key is already present.
    pub fn append(&self, exchange: LlmExchange) -> Result<(), LlmError> {
        let mut writer = self.writer.lock().expect("writer lock");
        if self
            .entries
            .read()
            .expect("store lock")
            .contains_key(&exchange.cache_key)
        {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if writer.is_none() {
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| LlmError::Store(e.to_string()))?;
                *writer = Some(f);
            }
            let line = serde_json::to_string(&exchange).map_err(|e| LlmError::Store(e.to_string()))?;
            let f = writer.as_mut().expect("opened above");
            writeln!(f, "{line}").map_err(|e| LlmError::Store(e.to_string()))?;
            f.flush().map_err(|e| LlmError::Store(e.to_string()))?;
        }
        self.entries
            .write()
            .expect("store lock")
            .insert(exchange.cache_key.clone(), exchange);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Live provider

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Runs `call` up to `policy.attempts` times with exponential backoff.
/// `Err(Some(status))` from `call` marks an HTTP status failure, `Err(None)`
/// a connection-level one; 4xx other than 429 is not retried.
pub(crate) fn with_retry<T>(
    policy: &RetryPolicy,
    mut call: impl FnMut() -> Result<T, (u16, String)>,
) -> Result<T, LlmError> {
    let mut last = (0, String::new());
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(policy.base_delay * 2u32.pow(attempt - 1));
        }
        match call() {
            Ok(v) => return Ok(v),
            Err((status, body)) => {
                let retryable = status == 0 || status == 429 || status >= 500;
                last = (status, body);
                if !retryable {
                    break;
                }
                log::warn!("provider call failed (status {status}), attempt {}", attempt + 1);
            }
        }
    }
    if last.0 == 429 {
        Err(LlmError::RateLimited)
    } else {
        Err(LlmError::TransportError {
            status: last.0,
            body: last.1,
        })
    }
}

pub(crate) fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, (u16, String)> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(k) = api_key {
        req = req.header("Authorization", &format!("Bearer {k}"));
    }
    let mut resp = req.send_json(body).map_err(|e| (0, e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| (0, e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err((status, text));
    }
    serde_json::from_str(&text).map_err(|e| (status, format!("invalid JSON: {e}")))
}

/// OpenAI-style `POST {base_url}/chat/completions` client.
pub struct ChatCompletionProvider {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl ChatCompletionProvider {
    /// Reads the bearer token from `DALK_API_KEY` when set.
    pub fn new(base_url: impl Into<String>) -> Self {
        ChatCompletionProvider {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
            agent: http_agent(Duration::from_secs(120)),
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl LlmProvider for ChatCompletionProvider {
    fn name(&self) -> &str {
        "chat-completions"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if let Some(s) = &request.system_prompt {
            messages.push(serde_json::json!({"role": "system", "content": s}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_prompt}));
        let body = serde_json::json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let url = format!("{}/chat/completions", self.base_url);
        let value = with_retry(&self.retry, || {
            post_json(&self.agent, &url, self.api_key.as_deref(), &body)
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))
    }
}

// ---------------------------------------------------------------------------
// Gateway

enum Mode {
    Direct(Arc<dyn LlmProvider>),
    Replay(Arc<ReplayStore>),
    Record(Arc<dyn LlmProvider>, Arc<ReplayStore>),
}

/// Failure of [`Gateway::complete_batch`]: the lowest failing index and the
/// responses that completed before the abort.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("batch aborted at request {index}: {error}")]
pub struct BatchError {
    pub index: usize,
    pub error: LlmError,
    pub partial: Vec<Option<String>>,
}

thread_local! {
    static TRACE: RefCell<Option<Vec<String>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns the cache keys of every [`Gateway::complete`] call
/// it made on the current thread, in call order.
pub fn traced<R>(f: impl FnOnce() -> R) -> (R, Vec<String>) {
    let outer = TRACE.with(|t| t.replace(Some(Vec::new())));
    let r = f();
    let keys = TRACE.with(|t| t.replace(outer)).unwrap_or_default();
    if !keys.is_empty() {
        TRACE.with(|t| {
            if let Some(outer) = t.borrow_mut().as_mut() {
                outer.extend(keys.iter().cloned());
            }
        });
    }
    (r, keys)
}

/// Shareable entry point for all model calls.
pub struct Gateway {
    mode: Mode,
    limit: usize,
    calls: AtomicUsize,
}

impl Gateway {
    pub fn direct(provider: Arc<dyn LlmProvider>) -> Self {
        Self::with_mode(Mode::Direct(provider))
    }

    pub fn scripted(mock: ScriptedMock) -> Self {
        Self::direct(Arc::new(mock))
    }

    pub fn replay(store: Arc<ReplayStore>) -> Self {
        Self::with_mode(Mode::Replay(store))
    }

    pub fn record(provider: Arc<dyn LlmProvider>, store: Arc<ReplayStore>) -> Self {
        Self::with_mode(Mode::Record(provider, store))
    }

    fn with_mode(mode: Mode) -> Self {
        Gateway {
            mode,
            limit: DEFAULT_CONCURRENCY,
            calls: AtomicUsize::new(0),
        }
    }

    /// Sets the in-flight limit used by [`complete_batch`](Self::complete_batch).
    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.limit = limit.max(1);
        self
    }

    pub fn concurrency(&self) -> usize {
        self.limit
    }

    /// Number of `complete` calls served so far, successful or not.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn provider_name(&self) -> &str {
        match &self.mode {
            Mode::Direct(p) | Mode::Record(p, _) => p.name(),
            Mode::Replay(_) => "replay",
        }
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        TRACE.with(|t| {
            if let Some(keys) = t.borrow_mut().as_mut() {
                keys.push(request.cache_key());
            }
        });
        request.validate()?;
        match &self.mode {
            Mode::Direct(p) => p.complete(request),
            Mode::Replay(store) => {
                let key = request.cache_key();
                store
                    .get(&key)
                    .map(|ex| ex.response_text)
                    .ok_or(LlmError::CacheMiss(key))
            }
            Mode::Record(p, store) => {
                let key = request.cache_key();
                if let Some(ex) = store.get(&key) {
                    return Ok(ex.response_text);
                }
                let text = p.complete(request)?;
                store.append(LlmExchange {
                    request: request.clone(),
                    response_text: text.clone(),
                    cache_key: key,
                    timestamp: Utc::now(),
                    provider_name: p.name().to_string(),
                })?;
                Ok(text)
            }
        }
    }

    /// Completes `requests` with at most [`concurrency`](Self::concurrency)
    /// outstanding at once. Responses come back in input order.
    pub fn complete_batch(&self, requests: &[LlmRequest]) -> Result<Vec<String>, BatchError> {
        let n = requests.len();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let results: Mutex<Vec<Option<Result<String, LlmError>>>> = Mutex::new(vec![None; n]);
        let workers = self.limit.min(n).max(1);

        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = self.complete(&requests[i]);
                    if r.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });

        let results = results.into_inner().expect("results lock");
        if let Some(index) = results.iter().position(|r| matches!(r, Some(Err(_)))) {
            let error = match &results[index] {
                Some(Err(e)) => e.clone(),
                _ => unreachable!(),
            };
            let partial = results.into_iter().map(|r| r.and_then(Result::ok)).collect();
            return Err(BatchError { index, error, partial });
        }
        Ok(results
            .into_iter()
            .map(|r| r.expect("every index visited").expect("no errors"))
            .collect())
    }
}

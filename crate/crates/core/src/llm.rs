//! Chat-completion client with explicit seeds, a content-addressed response
//! cache, bounded retries, and deterministic mock providers.
//!
//! Every request goes through [`LlmClient::complete`], whichever provider
//! sits behind it, so mock and HTTP runs produce records of the same shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parsing;
use crate::prompting::{CANDIDATES_PREFIX, SENTENCE_PREFIX, VALUES_PREFIX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    /// Everything in a single user message.
    Text { text: String },
    /// Instruction as a system message, remainder as the user message.
    Chat { system: String, user: String },
}

impl Prompt {
    /// Full prompt text as the model sees it, system part first.
    pub fn full_text(&self) -> String {
        match self {
            Prompt::Text { text } => text.clone(),
            Prompt::Chat { system, user } => format!("{system}\n\n{user}"),
        }
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        match self {
            Prompt::Text { text } => vec![ChatMessage::new("user", text)],
            Prompt::Chat { system, user } => vec![
                ChatMessage::new("system", system),
                ChatMessage::new("user", user),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: &str) -> Self {
        Self {
            role: role.to_string(),
            content: content.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub model: String,
    pub prompt: Prompt,
    /// Recorded even when the provider ignores it.
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    /// Hex SHA-256 over every field that can change the response.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            model: &'a str,
            prompt: &'a Prompt,
            seed: u64,
            temperature: f64,
            max_tokens: u32,
        }
        let material = serde_json::to_vec(&KeyMaterial {
            model: &self.model,
            prompt: &self.prompt,
            seed: self.seed,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(&material))
    }

    /// Digest of the prompt text alone; keys fixed mock tables.
    pub fn prompt_digest(&self) -> String {
        hex::encode(Sha256::digest(self.prompt.full_text().as_bytes()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMeta {
    pub provider: String,
    pub latency_ms: u64,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
    pub retries: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub cache_key: String,
    pub cached: bool,
    pub meta: ResponseMeta,
}

/// What a provider returns on success.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("transient failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("request failed (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
}

impl CallError {
    pub fn is_transient(&self) -> bool {
        matches!(self, CallError::Transient { .. })
    }

    /// 408, 429 and 5xx are worth retrying; other statuses are not.
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let message = message.into();
        if status == 408 || status == 429 || (500..600).contains(&status) {
            CallError::Transient {
                status: Some(status),
                message,
            }
        } else {
            CallError::Fatal {
                status: Some(status),
                message,
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request {digest}: {source}")]
    Provider { digest: String, source: CallError },
    #[error("request {digest}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        digest: String,
        attempts: u32,
        last: CallError,
    },
    #[error("response cache at {path}: {source}")]
    Cache {
        path: String,
        source: std::io::Error,
    },
    #[error("reading mock table {path}: {message}")]
    MockTable { path: String, message: String },
}

pub trait ChatProvider: Send + Sync {
    /// Stable identifier recorded in response metadata.
    fn id(&self) -> String;
    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, CallError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, CallError> {
        (**self).call(request)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(16));
        Duration::from_millis(exp.min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails fatally, or the retry budget is
    /// spent. On success also returns the number of retries used.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, CallError>,
    ) -> Result<(T, u32), (CallError, u32)> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(value) => return Ok((value, attempt)),
                Err(err) if err.is_transient() && attempt < self.max_retries => {
                    log::debug!("transient failure, retry {}: {err}", attempt + 1);
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(err) => return Err((err, attempt + 1)),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model: String,
    seed: u64,
    provider: String,
    text: String,
    prompt_tokens: Option<u32>,
    completion_tokens: Option<u32>,
}

/// Directory of `<key>.json` files. Entries are written once, atomically.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Cache {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn get(&self, key: &str) -> Option<CacheEntry> {
        let bytes = fs::read(self.path(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    fn put(&self, entry: &CacheEntry) -> Result<(), LlmError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let target = self.path(&entry.key);
        if target.exists() {
            return Ok(());
        }
        let json = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        write_atomic(&target, &json).map_err(|source| LlmError::Cache {
            path: target.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = target.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(target).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct ClientStats {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub provider_calls: AtomicU64,
    pub retries: AtomicU64,
    pub failures: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
    pub retries: u64,
    pub failures: u64,
}

impl ClientStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            provider_calls: self.provider_calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }
}

pub struct LlmClient {
    provider: Box<dyn ChatProvider>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    stats: ClientStats,
}

impl LlmClient {
    pub fn new(provider: impl ChatProvider + 'static) -> Self {
        Self {
            provider: Box::new(provider),
            cache: None,
            retry: RetryPolicy::default(),
            stats: ClientStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Cache first; on a miss, call the provider with bounded retries on
    /// transient failures and store the reply.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, LlmError> {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let key = request.cache_key();
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ModelResponse {
                text: entry.text,
                cache_key: key,
                cached: true,
                meta: ResponseMeta {
                    provider: entry.provider,
                    latency_ms: 0,
                    prompt_tokens: entry.prompt_tokens,
                    completion_tokens: entry.completion_tokens,
                    retries: 0,
                },
            });
        }

        let started = Instant::now();
        let outcome = self.retry.run(|| {
            self.stats.provider_calls.fetch_add(1, Ordering::Relaxed);
            self.provider.call(request)
        });
        let (reply, retries) = match outcome {
            Ok(ok) => ok,
            Err((err, attempts)) => {
                self.stats.failures.fetch_add(1, Ordering::Relaxed);
                self.stats
                    .retries
                    .fetch_add(u64::from(attempts.saturating_sub(1)), Ordering::Relaxed);
                return Err(if err.is_transient() {
                    LlmError::RetriesExhausted {
                        digest: key,
                        attempts,
                        last: err,
                    }
                } else {
                    LlmError::Provider {
                        digest: key,
                        source: err,
                    }
                });
            }
        };
        self.stats
            .retries
            .fetch_add(u64::from(retries), Ordering::Relaxed);

        let provider = self.provider.id();
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key: key.clone(),
                model: request.model.clone(),
                seed: request.seed,
                provider: provider.clone(),
                text: reply.text.clone(),
                prompt_tokens: reply.prompt_tokens,
                completion_tokens: reply.completion_tokens,
            })?;
        }
        Ok(ModelResponse {
            text: reply.text,
            cache_key: key,
            cached: false,
            meta: ResponseMeta {
                provider,
                latency_ms: started.elapsed().as_millis() as u64,
                prompt_tokens: reply.prompt_tokens,
                completion_tokens: reply.completion_tokens,
                retries,
            },
        })
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatProvider {
    endpoint: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self, CallError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| CallError::Fatal {
                status: None,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            token,
            client,
        })
    }
}

#[derive(Serialize)]
struct ChatWireRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    seed: u64,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatWireResponse {
    choices: Vec<ChatWireChoice>,
    #[serde(default)]
    usage: Option<ChatWireUsage>,
}

#[derive(Deserialize)]
struct ChatWireChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatWireUsage {
    prompt_tokens: Option<u32>,
    completion_tokens: Option<u32>,
}

pub(crate) fn transport_error(err: reqwest::Error) -> CallError {
    if err.is_timeout() || err.is_connect() || err.is_request() {
        CallError::Transient {
            status: None,
            message: err.to_string(),
        }
    } else {
        CallError::Fatal {
            status: err.status().map(|s| s.as_u16()),
            message: err.to_string(),
        }
    }
}

impl ChatProvider for HttpChatProvider {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, CallError> {
        let body = ChatWireRequest {
            model: &request.model,
            messages: request.prompt.messages(),
            seed: request.seed,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(transport_error)?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(CallError::from_status(status.as_u16(), text));
        }
        let wire: ChatWireResponse = response.json().map_err(|e| CallError::Fatal {
            status: Some(status.as_u16()),
            message: format!("unreadable completion body: {e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or_else(|| CallError::Fatal {
            status: Some(status.as_u16()),
            message: "completion has no choices".to_string(),
        })?;
        let usage = wire.usage;
        Ok(ProviderReply {
            text: choice.message.content,
            prompt_tokens: usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

/// Offline stand-ins for a chat model.
#[derive(Clone, Debug, PartialEq)]
pub enum MockSpec {
    /// Prompt digest to canned text; a missing digest is an error.
    FixedTable(BTreeMap<String, String>),
    /// Answer with the values of the first demonstration in the prompt.
    CopyNearest,
    /// [`MockSpec::CopyNearest`], then drop each label with `drop_rate` and
    /// add one random candidate with `add_rate`.
    NoisyCopy {
        drop_rate: f64,
        add_rate: f64,
        seed: u64,
    },
}

impl MockSpec {
    pub fn load_table(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::MockTable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let table = serde_json::from_str(&text).map_err(|e| LlmError::MockTable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(MockSpec::FixedTable(table))
    }

    pub fn noisy_default() -> Self {
        MockSpec::NoisyCopy {
            drop_rate: 0.2,
            add_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MockProvider {
    spec: MockSpec,
}

impl MockProvider {
    pub fn new(spec: MockSpec) -> Self {
        Self { spec }
    }
}

/// Values list of the first demonstration, if the prompt has one.
fn first_demonstration_values(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix(VALUES_PREFIX))
        .map(str::trim)
        .find(|rest| !rest.is_empty())
        .map(|rest| parsing::extract_list(rest).items)
        .unwrap_or_default()
}

fn candidate_values(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(CANDIDATES_PREFIX))
        .map(|rest| parsing::extract_list(rest).items)
        .unwrap_or_default()
}

/// Noise depends on the query sentence and seeds, not on the rest of the
/// prompt, so settings that copy the same demonstration get the same noise.
fn noise_rng(mock_seed: u64, request_seed: u64, prompt: &str) -> ChaCha8Rng {
    let query = prompt
        .lines()
        .rev()
        .find(|l| l.starts_with(SENTENCE_PREFIX))
        .unwrap_or("");
    let mut hasher = Sha256::new();
    hasher.update(mock_seed.to_le_bytes());
    hasher.update(request_seed.to_le_bytes());
    hasher.update(query.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn mock_complete(spec: &MockSpec, request: &ModelRequest) -> Result<ProviderReply, CallError> {
    let prompt = request.prompt.full_text();
    match spec {
        MockSpec::FixedTable(table) => {
            let digest = request.prompt_digest();
            table
                .get(&digest)
                .map(|t| ProviderReply::text(t.clone()))
                .ok_or_else(|| CallError::Fatal {
                    status: None,
                    message: format!("mock table has no entry for prompt digest {digest}"),
                })
        }
        MockSpec::CopyNearest => Ok(ProviderReply::text(parsing::format_list(
            &first_demonstration_values(&prompt),
        ))),
        MockSpec::NoisyCopy {
            drop_rate,
            add_rate,
            seed,
        } => {
            let mut rng = noise_rng(*seed, request.seed, &prompt);
            let mut labels: Vec<String> = first_demonstration_values(&prompt)
                .into_iter()
                .filter(|_| !rng.random_bool(drop_rate.clamp(0.0, 1.0)))
                .collect();
            if labels.is_empty() && first_demonstration_values(&prompt).is_empty() {
                // Nothing to copy from: stay silent rather than guess.
                return Ok(ProviderReply::text("[]"));
            }
            let candidates = candidate_values(&prompt);
            if !candidates.is_empty() && rng.random_bool(add_rate.clamp(0.0, 1.0)) {
                let extra = &candidates[rng.random_range(0..candidates.len())];
                if !labels.contains(extra) {
                    labels.push(extra.clone());
                }
            }
            Ok(ProviderReply::text(parsing::format_list(&labels)))
        }
    }
}

impl ChatProvider for MockProvider {
    fn id(&self) -> String {
        match &self.spec {
            MockSpec::FixedTable(_) => "mock:fixed-table".to_string(),
            MockSpec::CopyNearest => "mock:copy-nearest".to_string(),
            MockSpec::NoisyCopy {
                drop_rate,
                add_rate,
                seed,
            } => format!("mock:noisy-copy(drop={drop_rate},add={add_rate},seed={seed})"),
        }
    }

    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, CallError> {
        mock_complete(&self.spec, request)
    }
}

//! Cached, greedy-decoding access to an OpenAI-compatible chat-completions
//! endpoint, plus the classification and rationale requests built on it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::perturbation::{MaskScope, MaskedInput};
use crate::prompting::{PlaceholderValues, Placeholder, TemplateKey, TemplateRegistry};

pub const DEFAULT_RATIONALE_MAX_TOKENS: u32 = 128;
pub const DEFAULT_CLASSIFY_MAX_TOKENS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// Decoding is always greedy; only the token budget varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    pub fn greedy(max_tokens: u32) -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub decoding: Decoding,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>, max_tokens: u32) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            decoding: Decoding::greedy(max_tokens),
        }
    }

    /// Content address: SHA-256 over the canonical JSON of model id, messages
    /// and decoding settings.
    pub fn cache_key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelValue {
    Label(String),
    Invalid,
}

impl LabelValue {
    pub fn as_str(&self) -> &str {
        match self {
            LabelValue::Label(l) => l,
            LabelValue::Invalid => "INVALID",
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, LabelValue::Label(_))
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for LabelValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LabelValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "INVALID" {
            LabelValue::Invalid
        } else {
            LabelValue::Label(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedLabel {
    pub value: LabelValue,
    pub raw: String,
}

fn normalize_reply(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps a free-form reply onto the label space: exact match after
/// normalization, else the single label that occurs as a substring, else
/// INVALID.
pub fn match_label(reply: &str, label_space: &[String]) -> LabelValue {
    let norm = normalize_reply(reply);
    let labels: Vec<(String, &String)> = label_space
        .iter()
        .map(|l| (normalize_reply(l), l))
        .collect();
    if let Some((_, l)) = labels.iter().find(|(n, _)| *n == norm) {
        return LabelValue::Label((*l).clone());
    }
    let mut hits = labels.iter().filter(|(n, _)| !n.is_empty() && norm.contains(n.as_str()));
    match (hits.next(), hits.next()) {
        (Some((_, l)), None) => LabelValue::Label((*l).clone()),
        _ => LabelValue::Invalid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    /// Environment variable holding a bearer token, if the endpoint needs one.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_in_flight() -> usize {
    4
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key_env: None,
            timeout_secs: default_timeout_secs(),
            retry: RetryPolicy::default(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: ChatRequest,
    text: String,
    usage: Usage,
}

/// Content-addressed store of completions, one JSON file per request hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, request: &ChatRequest) -> Result<Option<(String, Usage)>> {
        let key = request.cache_key();
        let path = self.path(&key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Cache(format!("corrupt entry {}: {e}", path.display())))?;
        if entry.request != *request {
            return Err(Error::Cache(format!(
                "hash collision or tampered entry at {}",
                path.display()
            )));
        }
        Ok(Some((entry.text, entry.usage)))
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial entry.
    pub fn put(&self, request: &ChatRequest, text: &str, usage: Usage) -> Result<()> {
        let key = request.cache_key();
        let path = self.path(&key);
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let entry = CacheEntry {
            key,
            request: request.clone(),
            text: text.to_string(),
            usage,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
        serde_json::to_writer_pretty(&mut tmp, &entry)
            .map_err(|e| Error::Cache(format!("serialize entry: {e}")))?;
        tmp.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Shareable chat-completions client. Cache hits never touch the network;
/// with `offline` set, a miss is an error instead of a request.
pub struct ModelClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    cache: Option<ResponseCache>,
    offline: bool,
    network_calls: AtomicUsize,
    in_flight: Semaphore,
}

impl ModelClient {
    pub fn new(config: EndpointConfig, cache: Option<ResponseCache>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(ModelClient {
            config,
            http,
            cache,
            offline: false,
            network_calls: AtomicUsize::new(0),
            in_flight,
        })
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    /// HTTP attempts issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let started = Instant::now();
        if let Some(cache) = &self.cache {
            if let Some((text, usage)) = cache.get(request)? {
                return Ok(ChatResponse {
                    text,
                    usage,
                    latency: started.elapsed(),
                    from_cache: true,
                });
            }
        }
        let hash = request.cache_key();
        if self.offline {
            return Err(Error::Transport {
                hash,
                message: "cache miss in offline mode".into(),
            });
        }
        let (text, usage) = {
            let _permit = self.in_flight.acquire();
            self.call_with_retries(request, &hash)?
        };
        if let Some(cache) = &self.cache {
            cache.put(request, &text, usage)?;
        }
        Ok(ChatResponse {
            text,
            usage,
            latency: started.elapsed(),
            from_cache: false,
        })
    }

    fn call_with_retries(&self, request: &ChatRequest, hash: &str) -> Result<(String, Usage)> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = WireRequest {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        };
        let token = match &self.config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let mut req = self.http.post(&url).json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            let failure = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let bytes = resp.bytes().map_err(|e| Error::Transport {
                            hash: hash.to_string(),
                            message: format!("reading body: {e}"),
                        })?;
                        return parse_wire_response(&bytes, hash);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    let msg = format!("HTTP {status}");
                    if !retryable {
                        return Err(Error::Transport {
                            hash: hash.to_string(),
                            message: msg,
                        });
                    }
                    msg
                }
                Err(e) => format!("request failed: {}", error_chain(&e)),
            };
            if attempt >= policy.max_retries {
                return Err(Error::Transport {
                    hash: hash.to_string(),
                    message: format!("giving up after {} attempts: {failure}", attempt + 1),
                });
            }
            let wait = policy.backoff(attempt);
            warn!("request {hash}: {failure}; retrying in {wait:?}");
            thread::sleep(wait);
            attempt += 1;
        }
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut cur = e.source();
    while let Some(inner) = cur {
        s.push_str(": ");
        s.push_str(&inner.to_string());
        cur = inner.source();
    }
    s
}

fn parse_wire_response(bytes: &[u8], hash: &str) -> Result<(String, Usage)> {
    let resp: WireResponse = serde_json::from_slice(bytes).map_err(|e| Error::Protocol {
        hash: hash.to_string(),
        message: format!("invalid completion body: {e}"),
    })?;
    let choice = resp.choices.into_iter().next().ok_or_else(|| Error::Protocol {
        hash: hash.to_string(),
        message: "completion has no choices".into(),
    })?;
    debug!("request {hash} completed");
    Ok((
        choice.message.content.unwrap_or_default(),
        resp.usage.unwrap_or_default(),
    ))
}

/// Classification and rationale requests for one served model.
pub struct TaskModel<'a> {
    pub client: &'a ModelClient,
    pub registry: &'a TemplateRegistry,
    pub model_id: String,
    pub classify_max_tokens: u32,
    pub rationale_max_tokens: u32,
}

impl<'a> TaskModel<'a> {
    pub fn new(
        client: &'a ModelClient,
        registry: &'a TemplateRegistry,
        model_id: impl Into<String>,
    ) -> Self {
        TaskModel {
            client,
            registry,
            model_id: model_id.into(),
            classify_max_tokens: DEFAULT_CLASSIFY_MAX_TOKENS,
            rationale_max_tokens: DEFAULT_RATIONALE_MAX_TOKENS,
        }
    }

    /// Classification prompt for `example`, or for its masked variant.
    pub fn classification_prompt(
        &self,
        example: &Example,
        masked: Option<&MaskedInput>,
    ) -> Result<String> {
        let key = TemplateKey::classification(example.task());
        let tpl = self.registry.get(&key)?;
        let Some(masked) = masked else {
            return self.registry.render(&key, example, None, None);
        };
        if masked.example_id != example.id() {
            return Err(Error::Contract(format!(
                "masked input for {} used with example {}",
                masked.example_id,
                example.id()
            )));
        }
        let mut values = PlaceholderValues::default();
        for (name, text) in &masked.surviving_text {
            let ph = Placeholder::from_name(name)
                .filter(|p| p.is_segment())
                .ok_or_else(|| Error::Contract(format!("unknown segment {name}")))?;
            values.set(ph, text.clone());
        }
        let rendered = match masked.scope {
            MaskScope::Input => tpl.fill(&values)?,
            MaskScope::InputAndInstruction => tpl.fill_masking_instruction(
                &values,
                &masked.removed_instruction,
                masked.style,
            )?,
        };
        Ok(rendered.text)
    }

    /// Classifies the example, or its masked variant when `masked` is given.
    pub fn classify(&self, example: &Example, masked: Option<&MaskedInput>) -> Result<PredictedLabel> {
        let prompt = self.classification_prompt(example, masked)?;
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::user(prompt)],
            self.classify_max_tokens,
        );
        let resp = self.client.complete(&req)?;
        Ok(PredictedLabel {
            value: match_label(&resp.text, example.label_space()),
            raw: resp.text,
        })
    }

    /// Raw rationale text, unparsed.
    pub fn request_rationale(
        &self,
        example: &Example,
        key: &TemplateKey,
        label: &str,
        k: Option<usize>,
    ) -> Result<String> {
        let prompt = self.registry.render(key, example, Some(label), k)?;
        let req = ChatRequest::new(
            self.model_id.clone(),
            vec![ChatMessage::user(prompt)],
            self.rationale_max_tokens,
        );
        Ok(self.client.complete(&req)?.text)
    }
}

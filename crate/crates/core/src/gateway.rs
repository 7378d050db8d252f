//! Chat-completion gateway with budget accounting and record/replay.
//!
//! Every call goes through [`Gateway::complete`], which checks the time cap,
//! asks the backend for the projected usage of the call, refuses to issue it
//! when the projected cost would push the ledger past its USD cap, and only
//! then talks to the backend. Record mode stores each response in a
//! [`ReplayCache`] keyed by [`record_key`]; replay mode serves responses from
//! that cache and never touches the network.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Speaker {
    AgentFramework,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Error)]
#[error("turn out of order: expected a {expected:?} turn")]
pub struct TurnOrderError {
    pub expected: Speaker,
}

/// System prompt plus alternating turns, starting with the framework.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub system_prompt: String,
    turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(system_prompt: impl Into<String>) -> Self {
        Conversation {
            system_prompt: system_prompt.into(),
            turns: Vec::new(),
        }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    fn next_speaker(&self) -> Speaker {
        match self.turns.last() {
            None | Some(Turn { speaker: Speaker::Model, .. }) => Speaker::AgentFramework,
            Some(_) => Speaker::Model,
        }
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) -> Result<(), TurnOrderError> {
        let expected = self.next_speaker();
        if speaker != expected {
            return Err(TurnOrderError { expected });
        }
        self.turns.push(Turn {
            speaker,
            text: text.into(),
        });
        Ok(())
    }

    pub fn push_framework(&mut self, text: impl Into<String>) -> Result<(), TurnOrderError> {
        self.push(Speaker::AgentFramework, text)
    }

    pub fn push_model(&mut self, text: impl Into<String>) -> Result<(), TurnOrderError> {
        self.push(Speaker::Model, text)
    }

    pub fn model_turns(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Model)
            .map(|t| t.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(with = "humantime_serde", default)]
    pub wall_time: Duration,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Usage {
            prompt_tokens,
            completion_tokens,
            wall_time: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub usd_per_1k_prompt_tokens: f64,
    pub usd_per_1k_completion_tokens: f64,
}

impl ModelPrice {
    pub fn cost(&self, usage: &Usage) -> f64 {
        usage.prompt_tokens as f64 / 1000.0 * self.usd_per_1k_prompt_tokens
            + usage.completion_tokens as f64 / 1000.0 * self.usd_per_1k_completion_tokens
    }
}

/// Model id -> price. Loaded from a TOML file of the form
/// `[models."model-id"] usd_per_1k_prompt_tokens = .. usd_per_1k_completion_tokens = ..`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    #[serde(default)]
    pub models: BTreeMap<String, ModelPrice>,
}

impl PriceTable {
    pub fn with(mut self, model_id: impl Into<String>, price: ModelPrice) -> Self {
        self.models.insert(model_id.into(), price);
        self
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }

    pub fn price(&self, model_id: &str) -> Result<&ModelPrice, GatewayError> {
        self.models
            .get(model_id)
            .ok_or_else(|| GatewayError::UnknownModel(model_id.to_string()))
    }
}

/// Serializable view of a ledger at one observation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub spent_usd: f64,
    #[serde(with = "humantime_serde")]
    pub elapsed: Duration,
    pub cap_usd: f64,
    #[serde(with = "humantime_serde")]
    pub cap_time: Duration,
    pub calls: u64,
}

/// Money and wall-clock accounting for one task pipeline.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    spent_usd: f64,
    cap_usd: f64,
    cap_time: Duration,
    started: Instant,
    calls: u64,
    prices: PriceTable,
}

impl BudgetLedger {
    pub fn new(cap_usd: f64, cap_time: Duration, prices: PriceTable) -> Self {
        Self::starting_at(cap_usd, cap_time, prices, Instant::now())
    }

    pub fn starting_at(cap_usd: f64, cap_time: Duration, prices: PriceTable, started: Instant) -> Self {
        BudgetLedger {
            spent_usd: 0.0,
            cap_usd,
            cap_time,
            started,
            calls: 0,
            prices,
        }
    }

    pub fn spent_usd(&self) -> f64 {
        self.spent_usd
    }

    pub fn cap_usd(&self) -> f64 {
        self.cap_usd
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn remaining_time(&self) -> Duration {
        self.cap_time.saturating_sub(self.elapsed())
    }

    pub fn time_exhausted(&self) -> bool {
        self.elapsed() >= self.cap_time
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn cost(&self, model_id: &str, usage: &Usage) -> Result<f64, GatewayError> {
        Ok(self.prices.price(model_id)?.cost(usage))
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            spent_usd: self.spent_usd,
            elapsed: self.elapsed(),
            cap_usd: self.cap_usd,
            cap_time: self.cap_time,
            calls: self.calls,
        }
    }

    pub fn check_time(&self) -> Result<(), GatewayError> {
        if self.time_exhausted() {
            return Err(GatewayError::TimeExhausted {
                ledger: self.snapshot(),
            });
        }
        Ok(())
    }

    /// Fails without mutating when `projected_usd` would exceed the cap.
    pub fn check_affordable(&self, projected_usd: f64) -> Result<(), GatewayError> {
        if self.spent_usd + projected_usd > self.cap_usd + 1e-12 {
            return Err(GatewayError::BudgetExhausted {
                ledger: self.snapshot(),
                projected_usd,
            });
        }
        Ok(())
    }

    pub fn charge(&mut self, model_id: &str, usage: &Usage) -> Result<f64, GatewayError> {
        let cost = self.cost(model_id, usage)?;
        self.spent_usd += cost;
        self.calls += 1;
        Ok(cost)
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("budget exhausted: spent {:.4} of {:.4} USD, next call projected at {projected_usd:.4}", ledger.spent_usd, ledger.cap_usd)]
    BudgetExhausted {
        ledger: LedgerSnapshot,
        projected_usd: f64,
    },
    #[error("time budget exhausted after {:?}", ledger.elapsed)]
    TimeExhausted { ledger: LedgerSnapshot },
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("replay cache has no entry {digest} (turn {turn_index})")]
    ReplayMiss { digest: String, turn_index: usize },
    #[error("no price configured for model {0:?}")]
    UnknownModel(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("replay cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Stable content hash over the model id, system prompt and every turn in order.
pub fn record_key(conv: &Conversation, model_id: &str) -> String {
    fn field(h: &mut Sha256, bytes: &[u8]) {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    let mut h = Sha256::new();
    field(&mut h, b"povgen-record-v1");
    field(&mut h, model_id.as_bytes());
    field(&mut h, conv.system_prompt.as_bytes());
    for t in conv.turns() {
        h.update([match t.speaker {
            Speaker::AgentFramework => 0u8,
            Speaker::Model => 1u8,
        }]);
        field(&mut h, t.text.as_bytes());
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// Backends

pub trait ChatBackend: Send + Sync {
    /// Usage the next call is expected to incur; used for the pre-call budget check.
    fn projected_usage(&self, conv: &Conversation, model_id: &str) -> Result<Usage, GatewayError>;

    fn send(&self, conv: &Conversation, model_id: &str) -> Result<Completion, GatewayError>;
}

/// Serves a fixed sequence of responses, regardless of the conversation.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Completion>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = Completion>) -> Self {
        ScriptedBackend {
            queue: Mutex::new(responses.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>, usage: Usage) -> Self {
        Self::new(texts.into_iter().map(|t| Completion {
            text: t.into(),
            usage,
        }))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script queue poisoned").len()
    }

    fn exhausted(conv: &Conversation) -> GatewayError {
        GatewayError::TransportError(format!(
            "scripted backend has no response left (turn {})",
            conv.turns().len()
        ))
    }
}

impl ChatBackend for ScriptedBackend {
    fn projected_usage(&self, conv: &Conversation, _model_id: &str) -> Result<Usage, GatewayError> {
        let q = self.queue.lock().expect("script queue poisoned");
        q.front().map(|c| c.usage).ok_or_else(|| Self::exhausted(conv))
    }

    fn send(&self, conv: &Conversation, _model_id: &str) -> Result<Completion, GatewayError> {
        let mut q = self.queue.lock().expect("script queue poisoned");
        let next = q.pop_front().ok_or_else(|| Self::exhausted(conv))?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(next)
    }
}

/// One file per digest under a cache directory.
#[derive(Debug, Clone)]
pub struct ReplayCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model_id: String,
    text: String,
    prompt_tokens: u64,
    completion_tokens: u64,
    wall_time_ms: u64,
}

impl ReplayCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<Completion>, GatewayError> {
        let path = self.entry_path(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| {
            GatewayError::Cache(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: {e}", path.display()),
            ))
        })?;
        Ok(Some(Completion {
            text: entry.text,
            usage: Usage {
                prompt_tokens: entry.prompt_tokens,
                completion_tokens: entry.completion_tokens,
                wall_time: Duration::from_millis(entry.wall_time_ms),
            },
        }))
    }

    pub fn put(&self, digest: &str, model_id: &str, completion: &Completion) -> Result<(), GatewayError> {
        fs::create_dir_all(&self.dir)?;
        let entry = CacheEntry {
            model_id: model_id.to_string(),
            text: completion.text.clone(),
            prompt_tokens: completion.usage.prompt_tokens,
            completion_tokens: completion.usage.completion_tokens,
            wall_time_ms: completion.usage.wall_time.as_millis() as u64,
        };
        let json = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(&json)?;
        tmp.persist(self.entry_path(digest)).map_err(|e| e.error)?;
        Ok(())
    }

    fn lookup(&self, conv: &Conversation, model_id: &str) -> Result<Completion, GatewayError> {
        let digest = record_key(conv, model_id);
        self.get(&digest)?.ok_or(GatewayError::ReplayMiss {
            digest,
            turn_index: conv.turns().len(),
        })
    }
}

/// Serves responses from a [`ReplayCache`] only.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    cache: ReplayCache,
}

impl ReplayBackend {
    pub fn new(cache: ReplayCache) -> Self {
        ReplayBackend { cache }
    }
}

impl ChatBackend for ReplayBackend {
    fn projected_usage(&self, conv: &Conversation, model_id: &str) -> Result<Usage, GatewayError> {
        Ok(self.cache.lookup(conv, model_id)?.usage)
    }

    fn send(&self, conv: &Conversation, model_id: &str) -> Result<Completion, GatewayError> {
        self.cache.lookup(conv, model_id)
    }
}

/// Returns the recorded text and usage for `conv`, byte for byte.
pub fn replay_complete(
    conv: &Conversation,
    model_id: &str,
    cache: &ReplayCache,
) -> Result<Completion, GatewayError> {
    cache.lookup(conv, model_id)
}

/// OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    max_tokens: u64,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub const BASE_URL_ENV: &'static str = "POVGEN_API_BASE";
    pub const API_KEY_ENV: &'static str = "POVGEN_API_KEY";
    pub const DEFAULT_BASE_URL: &'static str = "https://api.openai.com/v1";

    pub fn new(base_url: impl Into<String>, api_key: Option<String>, max_tokens: u64, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            max_tokens,
            agent,
        }
    }

    pub fn from_env(max_tokens: u64, timeout: Duration) -> Self {
        let base = std::env::var(Self::BASE_URL_ENV).unwrap_or_else(|_| Self::DEFAULT_BASE_URL.to_string());
        let key = std::env::var(Self::API_KEY_ENV).ok();
        Self::new(base, key, max_tokens, timeout)
    }

    fn messages(conv: &Conversation) -> Vec<serde_json::Value> {
        let mut out = vec![serde_json::json!({"role": "system", "content": conv.system_prompt})];
        for t in conv.turns() {
            let role = match t.speaker {
                Speaker::AgentFramework => "user",
                Speaker::Model => "assistant",
            };
            out.push(serde_json::json!({"role": role, "content": t.text}));
        }
        out
    }
}

impl ChatBackend for HttpBackend {
    fn projected_usage(&self, conv: &Conversation, _model_id: &str) -> Result<Usage, GatewayError> {
        // Upper-bound style estimate: ~3 bytes per token plus per-message overhead.
        let bytes: usize = conv.system_prompt.len() + conv.turns().iter().map(|t| t.text.len()).sum::<usize>();
        let prompt = (bytes as u64).div_ceil(3) + 8 * (conv.turns().len() as u64 + 1);
        Ok(Usage::new(prompt, self.max_tokens))
    }

    fn send(&self, conv: &Conversation, model_id: &str) -> Result<Completion, GatewayError> {
        let body = serde_json::json!({
            "model": model_id,
            "messages": Self::messages(conv),
            "max_tokens": self.max_tokens,
        });
        let started = Instant::now();
        let mut req = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| GatewayError::TransportError(e.to_string()))?;
        let json: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| GatewayError::TransportError(format!("bad response body: {e}")))?;
        let text = json["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::TransportError("response has no message content".into()))?
            .to_string();
        let usage = Usage {
            prompt_tokens: json["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: json["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            wall_time: started.elapsed(),
        };
        Ok(Completion { text, usage })
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    recorder: Option<ReplayCache>,
    retries: u32,
}

impl Gateway {
    pub const DEFAULT_RETRIES: u32 = 2;

    pub fn live(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            recorder: None,
            retries: Self::DEFAULT_RETRIES,
        }
    }

    pub fn record(backend: Arc<dyn ChatBackend>, cache: ReplayCache) -> Self {
        Gateway {
            backend,
            recorder: Some(cache),
            retries: Self::DEFAULT_RETRIES,
        }
    }

    pub fn replay(cache: ReplayCache) -> Self {
        Gateway {
            backend: Arc::new(ReplayBackend::new(cache)),
            recorder: None,
            retries: 0,
        }
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    /// One model call. The ledger is charged before returning; the caller
    /// appends the text to the conversation.
    pub fn complete(
        &self,
        conv: &Conversation,
        model_id: &str,
        ledger: &mut BudgetLedger,
    ) -> Result<Completion, GatewayError> {
        ledger.check_time()?;
        let projected = self.backend.projected_usage(conv, model_id)?;
        ledger.check_affordable(ledger.cost(model_id, &projected)?)?;

        let mut attempt = 0;
        let completion = loop {
            match self.backend.send(conv, model_id) {
                Err(GatewayError::TransportError(msg)) if attempt < self.retries => {
                    log::warn!("model call failed ({msg}), retrying");
                    attempt += 1;
                }
                other => break other?,
            }
        };
        ledger.charge(model_id, &completion.usage)?;
        if let Some(cache) = &self.recorder {
            cache.put(&record_key(conv, model_id), model_id, &completion)?;
        }
        Ok(completion)
    }
}

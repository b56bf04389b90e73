//! LLM backends behind a single query interface.
//!
//! Every repetition of a prompt is an independent single-message
//! conversation; no chat history is shared between repetitions. Backends:
//!
//! * [`ChatCompletionsBackend`]: an OpenAI-compatible HTTP endpoint.
//! * [`MockBackend`]: deterministic stand-ins (constant, scripted by prompt
//!   hash, perfect oracle, seeded stochastic judge).
//! * [`ReplayBackend`] / [`RecordingBackend`]: a JSONL cassette store.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::GroundTruth;
use crate::prompt::{Label, LabelMode};

pub const API_KEY_ENV: &str = "DOCORACLE_API_KEY";
pub const FALLBACK_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("cache miss: no recorded response for prompt {prompt_hash} query {index}")]
    CacheMiss { prompt_hash: String, index: usize },
    #[error("cassette {path} corrupt at byte offset {offset}: {message}")]
    Integrity {
        path: String,
        offset: u64,
        message: String,
    },
    #[error("cassette {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryConfig {
    pub model_name: String,
    pub temperature: f64,
    /// Repetitions per prompt.
    pub n_queries: usize,
    pub max_retries: u32,
    pub request_timeout: Duration,
    pub parallelism_limit: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            model_name: "gpt-3.5-turbo-0613".to_string(),
            temperature: 0.7,
            n_queries: 5,
            max_retries: 3,
            request_timeout: Duration::from_secs(60),
            parallelism_limit: 4,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_queries == 0 {
            return Err(GatewayError::Config("n must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        if self.parallelism_limit == 0 {
            return Err(GatewayError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Original,
    Transformed,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Original => "original",
            Side::Transformed => "transformed",
        }
    }
}

/// What the caller knows about a prompt. Live and replay backends ignore
/// it; mocks use it to decide their answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryContext {
    pub pair_id: String,
    pub side: Side,
    pub ground_truth: GroundTruth,
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
    Replay,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Issues query number `index` for `prompt` as a fresh conversation.
    fn complete(&self, prompt: &str, ctx: &QueryContext, index: usize)
        -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTranscript {
    pub prompt_hash: String,
    /// Raw responses in issue order.
    pub responses: Vec<String>,
    pub backend: BackendKind,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Issues `config.n_queries` independent completions of `prompt`.
pub fn query(
    prompt: &str,
    ctx: &QueryContext,
    config: &QueryConfig,
    backend: &dyn Backend,
) -> Result<QueryTranscript, GatewayError> {
    config.validate()?;
    let started_at_ms = now_ms();
    let responses = (0..config.n_queries)
        .map(|index| backend.complete(prompt, ctx, index))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(QueryTranscript {
        prompt_hash: prompt_hash(prompt),
        responses,
        backend: backend.kind(),
        started_at_ms,
        finished_at_ms: now_ms(),
    })
}

// ---------------------------------------------------------------------------
// mocks

/// Parameters of the seeded stochastic judge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticJudge {
    /// Probability that a decided answer matches the ideal answer.
    pub accuracy: f64,
    /// Probability of answering undecidable (a coin flip between the two
    /// decided labels in two-label mode).
    pub undecidable_rate: f64,
    /// Fraction of pairs for which the judge ignores the oracle and gives
    /// one fixed label to every query of both prompts.
    pub blind_rate: f64,
    pub seed: u64,
}

impl StochasticJudge {
    pub const DEFAULT_BLIND_RATE: f64 = 0.2;

    pub fn new(accuracy: f64, undecidable_rate: f64, seed: u64) -> Self {
        StochasticJudge {
            accuracy,
            undecidable_rate,
            blind_rate: Self::DEFAULT_BLIND_RATE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("undecidable rate", self.undecidable_rate),
            ("blind rate", self.blind_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GatewayError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        for part in parts {
            hasher.update([0x1f]);
            hasher.update(part.as_bytes());
        }
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    fn coin(rng: &mut ChaCha8Rng) -> Label {
        if rng.random_bool(0.5) {
            Label::Correct
        } else {
            Label::Incorrect
        }
    }

    pub fn answer(&self, ctx: &QueryContext, index: usize) -> Label {
        let mut pair_rng = self.rng(&[&ctx.pair_id, "pair"]);
        let blind = pair_rng.random::<f64>() < self.blind_rate;
        let blind_label = Self::coin(&mut pair_rng);
        if blind {
            return blind_label;
        }
        let index = index.to_string();
        let mut rng = self.rng(&[&ctx.pair_id, ctx.side.as_str(), &index]);
        if rng.random::<f64>() < self.undecidable_rate {
            return match ctx.label_mode {
                LabelMode::ThreeLabel => Label::Undecidable,
                LabelMode::TwoLabel => Self::coin(&mut rng),
            };
        }
        match ideal_label(ctx) {
            Some(ideal) if rng.random::<f64>() < self.accuracy => ideal,
            Some(Label::Correct) => Label::Incorrect,
            Some(_) => Label::Correct,
            None => Self::coin(&mut rng),
        }
    }
}

/// What a perfect judge answers: the original oracle is correct exactly for
/// consistent pairs, and the negated oracle exactly for inconsistent ones.
pub fn ideal_label(ctx: &QueryContext) -> Option<Label> {
    let original_correct = match ctx.ground_truth {
        GroundTruth::Consistent => true,
        GroundTruth::Inconsistent => false,
        GroundTruth::Unknown => return None,
    };
    let correct = match ctx.side {
        Side::Original => original_correct,
        Side::Transformed => !original_correct,
    };
    Some(if correct { Label::Correct } else { Label::Incorrect })
}

/// A short chain-of-thought shaped response ending in `label`'s tag.
pub fn render_mock_response(label: Label) -> String {
    format!(
        "Step 1: The method signature was identified.\n\
         Step 2: The documentation describes the parameters and the return value.\n\
         Step 3: The test calls the method and asserts on the result.\n\
         Step 4: Would the assertion pass if the method behaved as documented?\n\
         Step 5: Labeling Oracle. {}",
        label.tag()
    )
}

#[derive(Debug, Clone)]
pub enum MockBackend {
    /// Always answers the same text.
    Constant(String),
    /// Responses keyed by prompt hash; query `i` gets entry `i % len`.
    Scripted(HashMap<String, Vec<String>>),
    PerfectOracle,
    Stochastic(StochasticJudge),
}

impl MockBackend {
    /// Loads a scripted mock from a JSON object `{prompt_hash: [responses]}`.
    pub fn scripted_from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let io = |source| GatewayError::Io {
            path: path.display().to_string(),
            source,
        };
        let text = std::fs::read_to_string(path).map_err(io)?;
        let scripts: HashMap<String, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("script {}: {e}", path.display())))?;
        if scripts.values().any(Vec::is_empty) {
            return Err(GatewayError::Config("script entries must be non-empty".into()));
        }
        Ok(MockBackend::Scripted(scripts))
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(
        &self,
        prompt: &str,
        ctx: &QueryContext,
        index: usize,
    ) -> Result<String, GatewayError> {
        Ok(match self {
            MockBackend::Constant(text) => text.clone(),
            MockBackend::Scripted(scripts) => {
                let hash = prompt_hash(prompt);
                let responses = scripts
                    .get(&hash)
                    .ok_or(GatewayError::CacheMiss { prompt_hash: hash, index })?;
                responses[index % responses.len()].clone()
            }
            MockBackend::PerfectOracle => {
                render_mock_response(ideal_label(ctx).unwrap_or(match ctx.label_mode {
                    LabelMode::ThreeLabel => Label::Undecidable,
                    LabelMode::TwoLabel => Label::Correct,
                }))
            }
            MockBackend::Stochastic(judge) => render_mock_response(judge.answer(ctx, index)),
        })
    }
}

// ---------------------------------------------------------------------------
// cassette store

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteEntry {
    pub prompt_hash: String,
    pub index: usize,
    pub response: String,
    pub backend: BackendKind,
    pub timestamp: u64,
}

#[derive(Default)]
struct StoreInner {
    entries: HashMap<String, BTreeMap<usize, String>>,
    writer: Option<File>,
}

/// Append-only JSONL store of responses keyed by prompt hash and query
/// index. Appends are serialized through one writer; a later entry for the
/// same key shadows an earlier one.
pub struct CassetteStore {
    path: PathBuf,
    inner: Mutex<StoreInner>,
}

impl fmt::Debug for CassetteStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CassetteStore").field("path", &self.path).finish()
    }
}

impl CassetteStore {
    /// Opens an existing cassette for replay only.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let entries = Self::read_entries(&path)?;
        Ok(CassetteStore {
            path,
            inner: Mutex::new(StoreInner {
                entries,
                writer: None,
            }),
        })
    }

    /// Opens (creating if needed) a cassette for recording.
    pub fn open_for_append(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            Self::read_entries(&path)?
        } else {
            HashMap::new()
        };
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| GatewayError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(CassetteStore {
            path,
            inner: Mutex::new(StoreInner {
                entries,
                writer: Some(writer),
            }),
        })
    }

    fn read_entries(path: &Path) -> Result<HashMap<String, BTreeMap<usize, String>>, GatewayError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| GatewayError::Io {
            path: display.clone(),
            source,
        })?;
        let mut reader = BufReader::new(file);
        let mut entries: HashMap<String, BTreeMap<usize, String>> = HashMap::new();
        let mut offset = 0u64;
        let mut line = String::new();
        loop {
            line.clear();
            let read = reader.read_line(&mut line).map_err(|e| GatewayError::Integrity {
                path: display.clone(),
                offset,
                message: e.to_string(),
            })?;
            if read == 0 {
                break;
            }
            if !line.trim().is_empty() {
                let entry: CassetteEntry =
                    serde_json::from_str(&line).map_err(|e| GatewayError::Integrity {
                        path: display.clone(),
                        offset,
                        message: e.to_string(),
                    })?;
                entries
                    .entry(entry.prompt_hash)
                    .or_default()
                    .insert(entry.index, entry.response);
            }
            offset += read as u64;
        }
        Ok(entries)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record_one(
        &self,
        prompt_hash: &str,
        index: usize,
        response: &str,
        backend: BackendKind,
    ) -> Result<(), GatewayError> {
        let mut inner = self.inner.lock().expect("cassette lock poisoned");
        self.append(&mut inner, prompt_hash, index, response, backend)
    }

    /// Records `response` unless the key already has one, and returns the
    /// response stored for the key either way.
    pub fn record_first(
        &self,
        prompt_hash: &str,
        index: usize,
        response: &str,
        backend: BackendKind,
    ) -> Result<String, GatewayError> {
        let mut inner = self.inner.lock().expect("cassette lock poisoned");
        if let Some(existing) = inner.entries.get(prompt_hash).and_then(|m| m.get(&index)) {
            return Ok(existing.clone());
        }
        self.append(&mut inner, prompt_hash, index, response, backend)?;
        Ok(response.to_string())
    }

    fn append(
        &self,
        inner: &mut StoreInner,
        prompt_hash: &str,
        index: usize,
        response: &str,
        backend: BackendKind,
    ) -> Result<(), GatewayError> {
        let entry = CassetteEntry {
            prompt_hash: prompt_hash.to_string(),
            index,
            response: response.to_string(),
            backend,
            timestamp: now_ms(),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        let Some(writer) = inner.writer.as_mut() else {
            return Err(GatewayError::Config(format!(
                "cassette {} is open read-only",
                self.path.display()
            )));
        };
        writer
            .write_all(line.as_bytes())
            .and_then(|()| writer.flush())
            .map_err(|source| GatewayError::Io {
                path: self.path.display().to_string(),
                source,
            })?;
        inner
            .entries
            .entry(entry.prompt_hash)
            .or_default()
            .insert(index, entry.response);
        Ok(())
    }

    /// Records `responses` for `prompt` at indices `0..responses.len()`.
    pub fn record(
        &self,
        prompt: &str,
        responses: &[String],
        backend: BackendKind,
    ) -> Result<(), GatewayError> {
        let hash = prompt_hash(prompt);
        responses
            .iter()
            .enumerate()
            .try_for_each(|(i, r)| self.record_one(&hash, i, r, backend))
    }

    pub fn lookup(&self, prompt_hash: &str, index: usize) -> Option<String> {
        let inner = self.inner.lock().expect("cassette lock poisoned");
        inner.entries.get(prompt_hash)?.get(&index).cloned()
    }

    /// All recorded responses for a prompt, in index order.
    pub fn replay(&self, prompt_hash: &str) -> Result<Vec<String>, GatewayError> {
        let inner = self.inner.lock().expect("cassette lock poisoned");
        inner
            .entries
            .get(prompt_hash)
            .map(|m| m.values().cloned().collect())
            .ok_or_else(|| GatewayError::CacheMiss {
                prompt_hash: prompt_hash.to_string(),
                index: 0,
            })
    }

    pub fn len(&self) -> usize {
        let inner = self.inner.lock().expect("cassette lock poisoned");
        inner.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ReplayBackend {
    store: std::sync::Arc<CassetteStore>,
}

impl ReplayBackend {
    pub fn new(store: std::sync::Arc<CassetteStore>) -> Self {
        ReplayBackend { store }
    }
}

impl Backend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, prompt: &str, _: &QueryContext, index: usize) -> Result<String, GatewayError> {
        let hash = prompt_hash(prompt);
        self.store
            .lookup(&hash, index)
            .ok_or(GatewayError::CacheMiss {
                prompt_hash: hash,
                index,
            })
    }
}

/// Forwards to an inner backend and records every response. A prompt and
/// index already in the cassette is answered from it, so a recording run
/// sees exactly what a later replay will.
pub struct RecordingBackend {
    inner: Box<dyn Backend>,
    store: std::sync::Arc<CassetteStore>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn Backend>, store: std::sync::Arc<CassetteStore>) -> Self {
        RecordingBackend { inner, store }
    }
}

impl Backend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, prompt: &str, ctx: &QueryContext, index: usize) -> Result<String, GatewayError> {
        let hash = prompt_hash(prompt);
        if let Some(response) = self.store.lookup(&hash, index) {
            return Ok(response);
        }
        let response = self.inner.complete(prompt, ctx, index)?;
        self.store.record_first(&hash, index, &response, self.inner.kind())
    }
}

// ---------------------------------------------------------------------------
// live client

/// Exponential backoff: `base * 2^attempt`, capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(500),
            cap: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = self.base.saturating_mul(1u32 << attempt.min(16));
        retry_after.unwrap_or(exp).min(self.cap)
    }
}

fn is_retryable_status(status: u16) -> bool {
    matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible chat-completions client. Each query is one user
/// message; the first choice's content is the raw response.
pub struct ChatCompletionsBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    temperature: f64,
    max_retries: u32,
    backoff: Backoff,
    agent: ureq::Agent,
}

impl fmt::Debug for ChatCompletionsBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatCompletionsBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

/// Reads the API key from the environment.
pub fn api_key_from_env() -> Option<String> {
    [API_KEY_ENV, FALLBACK_API_KEY_ENV]
        .iter()
        .find_map(|name| std::env::var(name).ok().filter(|v| !v.trim().is_empty()))
}

impl ChatCompletionsBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, config: &QueryConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatCompletionsBackend {
            endpoint: endpoint.into(),
            api_key,
            model: config.model_name.clone(),
            temperature: config.temperature,
            max_retries: config.max_retries,
            backoff: Backoff::default(),
            agent,
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, prompt: &str) -> Result<String, (bool, String, Option<Duration>)> {
        let body = ChatRequest {
            model: &self.model,
            temperature: self.temperature,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| (true, format!("transport: {e}"), None))?;
        let status = response.status().as_u16();
        if status == 200 {
            let parsed: ChatResponse = response
                .body_mut()
                .read_json()
                .map_err(|e| (false, format!("invalid response body: {e}"), None))?;
            return parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| (false, "response has no message content".to_string(), None));
        }
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = response.body_mut().read_to_string().unwrap_or_default();
        let excerpt: String = text.chars().take(200).collect();
        Err((
            is_retryable_status(status),
            format!("HTTP {status}: {excerpt}"),
            retry_after,
        ))
    }
}

impl Backend for ChatCompletionsBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn complete(&self, prompt: &str, _: &QueryContext, _: usize) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err((true, message, retry_after)) if attempt < self.max_retries => {
                    let delay = self.backoff.delay(attempt, retry_after);
                    log::warn!("{message}; retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err((_, message, _)) => {
                    return Err(GatewayError::Backend(format!(
                        "{message} (after {} attempts)",
                        attempt + 1
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::Arc;

    fn ctx(side: Side, gt: GroundTruth) -> QueryContext {
        QueryContext {
            pair_id: "lang-1".into(),
            side,
            ground_truth: gt,
            label_mode: LabelMode::ThreeLabel,
        }
    }

    fn config(n: usize) -> QueryConfig {
        QueryConfig {
            n_queries: n,
            ..QueryConfig::default()
        }
    }

    #[test]
    fn constant_mock_repeats() {
        let t = query(
            "p",
            &ctx(Side::Original, GroundTruth::Unknown),
            &config(5),
            &MockBackend::Constant("<correct>".into()),
        )
        .unwrap();
        assert_eq!(t.responses, vec!["<correct>".to_string(); 5]);
        assert_eq!(t.backend, BackendKind::Mock);
        assert_eq!(t.prompt_hash, prompt_hash("p"));
    }

    #[test]
    fn perfect_oracle_answers() {
        let m = MockBackend::PerfectOracle;
        let answer = |side, gt| {
            let text = m.complete("p", &ctx(side, gt), 0).unwrap();
            crate::prompt::parse_verdict(&text, LabelMode::ThreeLabel).unwrap().label
        };
        assert_eq!(answer(Side::Original, GroundTruth::Consistent), Label::Correct);
        assert_eq!(answer(Side::Transformed, GroundTruth::Consistent), Label::Incorrect);
        assert_eq!(answer(Side::Original, GroundTruth::Inconsistent), Label::Incorrect);
        assert_eq!(answer(Side::Transformed, GroundTruth::Inconsistent), Label::Correct);
        assert_eq!(answer(Side::Original, GroundTruth::Unknown), Label::Undecidable);
    }

    #[test]
    fn stochastic_is_reproducible() {
        let judge = MockBackend::Stochastic(StochasticJudge::new(0.8, 0.1, 42));
        let c = ctx(Side::Original, GroundTruth::Inconsistent);
        let a = query("p", &c, &config(20), &judge).unwrap();
        let b = query("p", &c, &config(20), &judge).unwrap();
        assert_eq!(a.responses, b.responses);

        let other = MockBackend::Stochastic(StochasticJudge::new(0.8, 0.1, 43));
        let many = |m: &MockBackend| {
            (0..50)
                .map(|i| {
                    let c = QueryContext {
                        pair_id: format!("p{i}"),
                        ..c.clone()
                    };
                    query("p", &c, &config(5), m).unwrap().responses
                })
                .collect::<Vec<_>>()
        };
        assert_ne!(many(&judge), many(&other));
    }

    #[test]
    fn stochastic_rates_roughly_hold() {
        let judge = StochasticJudge {
            blind_rate: 0.0,
            ..StochasticJudge::new(0.8, 0.1, 7)
        };
        let mut counts = HashMap::new();
        for i in 0..4000 {
            let c = QueryContext {
                pair_id: format!("p{i}"),
                ..ctx(Side::Original, GroundTruth::Consistent)
            };
            *counts.entry(judge.answer(&c, 0)).or_insert(0usize) += 1;
        }
        let frac = |l| counts.get(&l).copied().unwrap_or(0) as f64 / 4000.0;
        assert!((frac(Label::Undecidable) - 0.1).abs() < 0.02);
        assert!((frac(Label::Correct) - 0.72).abs() < 0.03);
    }

    #[test]
    fn stochastic_blind_pairs_are_fixed() {
        let judge = StochasticJudge {
            blind_rate: 1.0,
            ..StochasticJudge::new(0.8, 0.1, 1)
        };
        let o = ctx(Side::Original, GroundTruth::Consistent);
        let t = ctx(Side::Transformed, GroundTruth::Consistent);
        let first = judge.answer(&o, 0);
        assert!((0..10).all(|i| judge.answer(&o, i) == first && judge.answer(&t, i) == first));
    }

    #[test]
    fn stochastic_two_label_never_undecidable() {
        let judge = StochasticJudge::new(0.8, 0.5, 3);
        for i in 0..200 {
            let c = QueryContext {
                pair_id: format!("p{i}"),
                label_mode: LabelMode::TwoLabel,
                ..ctx(Side::Transformed, GroundTruth::Inconsistent)
            };
            assert_ne!(judge.answer(&c, i), Label::Undecidable);
        }
    }

    #[test]
    fn scripted_mock() {
        let mut scripts = HashMap::new();
        scripts.insert(prompt_hash("p"), vec!["a".to_string(), "b".to_string()]);
        let m = MockBackend::Scripted(scripts);
        let c = ctx(Side::Original, GroundTruth::Unknown);
        let t = query("p", &c, &config(3), &m).unwrap();
        assert_eq!(t.responses, ["a", "b", "a"]);
        assert!(matches!(
            m.complete("q", &c, 0),
            Err(GatewayError::CacheMiss { .. })
        ));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let store = CassetteStore::open_for_append(&path).unwrap();
        let responses = vec!["one <correct>".to_string(), "two\n\"quoted\"".to_string()];
        store.record("prompt", &responses, BackendKind::Live).unwrap();
        assert_eq!(store.replay(&prompt_hash("prompt")).unwrap(), responses);
        drop(store);

        let store = Arc::new(CassetteStore::open(&path).unwrap());
        assert_eq!(store.replay(&prompt_hash("prompt")).unwrap(), responses);
        assert!(matches!(
            store.replay(&prompt_hash("unknown")),
            Err(GatewayError::CacheMiss { .. })
        ));
        assert!(store.record_one("h", 0, "x", BackendKind::Mock).is_err());

        let replay = ReplayBackend::new(store);
        let t = query("prompt", &ctx(Side::Original, GroundTruth::Unknown), &config(2), &replay)
            .unwrap();
        assert_eq!(t.responses, responses);
        assert_eq!(t.backend, BackendKind::Replay);
        let err = query("prompt", &ctx(Side::Original, GroundTruth::Unknown), &config(3), &replay)
            .unwrap_err();
        assert!(matches!(err, GatewayError::CacheMiss { index: 2, .. }));
    }

    #[test]
    fn recording_backend_writes_through() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let store = Arc::new(CassetteStore::open_for_append(&path).unwrap());
        let rec = RecordingBackend::new(Box::new(MockBackend::PerfectOracle), store.clone());
        let c = ctx(Side::Original, GroundTruth::Consistent);
        let live = query("p", &c, &config(3), &rec).unwrap();
        let replayed = query("p", &c, &config(3), &ReplayBackend::new(store)).unwrap();
        assert_eq!(live.responses, replayed.responses);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: CassetteEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.backend, BackendKind::Mock);
        assert_eq!(first.index, 0);
    }

    #[test]
    fn recording_reuses_stored_answer_for_shared_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let store = Arc::new(CassetteStore::open_for_append(&path).unwrap());
        let rec = RecordingBackend::new(Box::new(MockBackend::PerfectOracle), store.clone());
        // same prompt text reached from two pairs with opposite ideal answers
        let a = rec.complete("p", &ctx(Side::Original, GroundTruth::Consistent), 0).unwrap();
        let b = rec.complete("p", &ctx(Side::Original, GroundTruth::Inconsistent), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert_eq!(store.record_first("h", 0, "x", BackendKind::Mock).unwrap(), "x");
        assert_eq!(store.record_first("h", 0, "y", BackendKind::Mock).unwrap(), "x");
    }

    #[test]
    fn corrupt_cassette_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&CassetteEntry {
            prompt_hash: "h".into(),
            index: 0,
            response: "r".into(),
            backend: BackendKind::Live,
            timestamp: 1,
        })
        .unwrap();
        std::fs::write(&path, format!("{good}\n{{broken\n")).unwrap();
        match CassetteStore::open(&path).unwrap_err() {
            GatewayError::Integrity { offset, .. } => assert_eq!(offset, good.len() as u64 + 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn concurrent_records_of_distinct_prompts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let store = Arc::new(CassetteStore::open_for_append(&path).unwrap());
        // two writers interleave strictly via a barrier per round
        let barrier = Arc::new(std::sync::Barrier::new(2));
        let handles: Vec<_> = ["alpha", "beta"]
            .into_iter()
            .map(|prompt| {
                let store = store.clone();
                let barrier = barrier.clone();
                thread::spawn(move || {
                    for i in 0..25 {
                        barrier.wait();
                        store
                            .record_one(&prompt_hash(prompt), i, &format!("{prompt}-{i}"), BackendKind::Mock)
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let reopened = CassetteStore::open(&path).unwrap();
        for prompt in ["alpha", "beta"] {
            let got = reopened.replay(&prompt_hash(prompt)).unwrap();
            let want: Vec<_> = (0..25).map(|i| format!("{prompt}-{i}")).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn backoff_growth() {
        let b = Backoff {
            base: Duration::from_millis(100),
            cap: Duration::from_secs(1),
        };
        assert_eq!(b.delay(0, None), Duration::from_millis(100));
        assert_eq!(b.delay(2, None), Duration::from_millis(400));
        assert_eq!(b.delay(10, None), Duration::from_secs(1));
        assert_eq!(b.delay(0, Some(Duration::from_secs(5))), Duration::from_secs(1));
    }

    /// Serves the canned HTTP responses in order, one per connection, and
    /// returns the captured request bodies.
    fn serve(responses: Vec<String>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for canned in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let len = text[..head_end]
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= head_end + 4 + len {
                            bodies.push(text[head_end + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                stream.write_all(canned.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn http(status: &str, extra: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\n{extra}Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    #[test]
    fn live_client_retries_rate_limit() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Step 5: <incorrect>"}}]}"#;
        let (url, server) = serve(vec![
            http("429 Too Many Requests", "Retry-After: 0\r\n", "{}"),
            http("503 Service Unavailable", "", "{}"),
            http("200 OK", "", ok),
        ]);
        let cfg = QueryConfig {
            max_retries: 2,
            request_timeout: Duration::from_secs(5),
            ..QueryConfig::default()
        };
        let backend = ChatCompletionsBackend::new(url, Some("k".into()), &cfg).with_backoff(Backoff {
            base: Duration::from_millis(1),
            cap: Duration::from_millis(5),
        });
        let text = backend
            .complete("the prompt", &ctx(Side::Original, GroundTruth::Unknown), 0)
            .unwrap();
        assert_eq!(text, "Step 5: <incorrect>");
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 3);
        let req: serde_json::Value = serde_json::from_str(&bodies[2]).unwrap();
        assert_eq!(req["messages"].as_array().unwrap().len(), 1);
        assert_eq!(req["messages"][0]["role"], "user");
        assert_eq!(req["messages"][0]["content"], "the prompt");
        assert_eq!(req["temperature"], 0.7);
    }

    #[test]
    fn live_client_gives_up() {
        let (url, server) = serve(vec![
            http("500 Internal Server Error", "", "{}"),
            http("500 Internal Server Error", "", "{}"),
        ]);
        let cfg = QueryConfig {
            max_retries: 1,
            ..QueryConfig::default()
        };
        let backend = ChatCompletionsBackend::new(url, None, &cfg).with_backoff(Backoff {
            base: Duration::from_millis(1),
            cap: Duration::from_millis(1),
        });
        let err = backend
            .complete("p", &ctx(Side::Original, GroundTruth::Unknown), 0)
            .unwrap_err();
        assert!(matches!(err, GatewayError::Backend(ref m) if m.contains("HTTP 500")), "{err}");
        server.join().unwrap();
    }

    #[test]
    fn live_client_no_retry_on_client_error() {
        let (url, server) = serve(vec![http("401 Unauthorized", "", r#"{"error":"bad key"}"#)]);
        let backend = ChatCompletionsBackend::new(url, None, &QueryConfig::default());
        let err = backend
            .complete("p", &ctx(Side::Original, GroundTruth::Unknown), 0)
            .unwrap_err();
        assert!(err.to_string().contains("HTTP 401"));
        assert!(err.to_string().contains("after 1 attempts"));
        server.join().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(config(0).validate().is_err());
        let bad = QueryConfig {
            temperature: f64::INFINITY,
            ..QueryConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(QueryConfig::default().validate().is_ok());
    }
}

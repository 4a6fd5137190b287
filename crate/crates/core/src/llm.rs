//! Chat-completion providers: live HTTP, transcript replay/recording and a
//! scripted mock, plus parallel candidate sampling.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reward::{extract_code_block, parse, Arity, CompiledReward, ParseContext, RewardSource};

pub const ENV_ENDPOINT: &str = "PROF_LLM_ENDPOINT";
pub const ENV_KEY: &str = "PROF_LLM_KEY";
pub const ENV_MODEL: &str = "PROF_LLM_MODEL";

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
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub top_p: f64,
    pub model_name: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { temperature: 0.7, max_output_tokens: 10_000, top_p: 1.0, model_name: String::new() }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature must be non-negative, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no transcript entry for request {digest} ({tag})")]
    ReplayMiss { digest: String, tag: String },
    #[error("scripted responses exhausted")]
    ScriptExhausted,
    #[error("transcript error: {0}")]
    Transcript(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallStage {
    Generate,
    Loss,
    Grad,
    Update,
}

impl fmt::Display for CallStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CallStage::Generate => "generate",
            CallStage::Loss => "loss",
            CallStage::Grad => "grad",
            CallStage::Update => "update",
        })
    }
}

/// Position of a call within a run. Identical prompts issued from different
/// slots are told apart by their tag during replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub round: u32,
    pub slot: u32,
    pub stage: CallStage,
    pub attempt: u32,
}

impl fmt::Display for CallTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round {} slot {} {} attempt {}", self.round, self.slot, self.stage, self.attempt)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

pub trait Provider: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], cfg: &GenerationConfig, tag: CallTag) -> Result<Completion, LlmError>;

    fn kind(&self) -> &'static str;

    /// Whether callers must issue calls one at a time in a fixed order.
    fn sequential(&self) -> bool {
        false
    }
}

/// Hex SHA-256 of the canonical JSON of `(messages, cfg)`.
pub fn request_digest(messages: &[ChatMessage], cfg: &GenerationConfig) -> String {
    #[derive(Serialize)]
    struct Canon<'a> {
        messages: &'a [ChatMessage],
        cfg: &'a GenerationConfig,
    }
    let bytes = serde_json::to_vec(&Canon { messages, cfg }).expect("plain data serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRequest {
    pub messages: Vec<ChatMessage>,
    pub cfg: GenerationConfig,
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub digest: String,
    pub tag: CallTag,
    pub request: TranscriptRequest,
    pub response: String,
    pub usage: Option<Usage>,
    pub timestamp: String,
}

// ---------------------------------------------------------------------------
// script

/// Pops pre-written responses in call order.
pub struct ScriptProvider {
    queue: Mutex<VecDeque<String>>,
}

impl ScriptProvider {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptProvider { queue: Mutex::new(responses.into_iter().map(Into::into).collect()) }
    }

    /// Reads a JSON array of response strings.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Config(format!("script file {}: {e}", path.display())))?;
        let responses: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| LlmError::Config(format!("script file {} must be a JSON array of strings: {e}", path.display())))?;
        Ok(Self::new(responses))
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap_or_else(|p| p.into_inner()).len()
    }
}

impl Provider for ScriptProvider {
    fn complete(&self, _: &[ChatMessage], _: &GenerationConfig, tag: CallTag) -> Result<Completion, LlmError> {
        let text = self.queue.lock().unwrap_or_else(|p| p.into_inner()).pop_front().ok_or(LlmError::ScriptExhausted)?;
        debug!("script response for {tag}");
        Ok(Completion { text, usage: None })
    }

    fn kind(&self) -> &'static str {
        "script"
    }

    fn sequential(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// replay and recording

/// Serves responses from a transcript, keyed by request digest and call tag.
pub struct ReplayProvider {
    entries: HashMap<(String, CallTag), Completion>,
}

impl ReplayProvider {
    pub fn from_records(records: Vec<TranscriptRecord>) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        for (i, r) in records.into_iter().enumerate() {
            let actual = request_digest(&r.request.messages, &r.request.cfg);
            if actual != r.digest {
                return Err(LlmError::Transcript(format!(
                    "record {i} digest {} does not match its request ({actual})",
                    r.digest
                )));
            }
            entries.insert((r.digest, r.tag), Completion { text: r.response, usage: r.usage });
        }
        Ok(ReplayProvider { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        Self::from_records(read_transcript(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let file = File::open(path).map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| LlmError::Transcript(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

impl Provider for ReplayProvider {
    fn complete(&self, messages: &[ChatMessage], cfg: &GenerationConfig, tag: CallTag) -> Result<Completion, LlmError> {
        let digest = request_digest(messages, cfg);
        self.entries
            .get(&(digest.clone(), tag))
            .cloned()
            .ok_or_else(|| LlmError::ReplayMiss { digest, tag: tag.to_string() })
    }

    fn kind(&self) -> &'static str {
        "replay"
    }
}

/// Forwards to an inner provider and appends every successful call to a
/// transcript file.
pub struct RecordingProvider<P> {
    inner: P,
    path: PathBuf,
    file: Mutex<File>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P, path: &Path) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        Ok(RecordingProvider { inner, path: path.to_owned(), file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, messages: &[ChatMessage], cfg: &GenerationConfig, tag: CallTag) -> Result<Completion, LlmError> {
        let c = self.inner.complete(messages, cfg, tag)?;
        let record = TranscriptRecord {
            digest: request_digest(messages, cfg),
            tag,
            request: TranscriptRequest { messages: messages.to_vec(), cfg: cfg.clone() },
            response: c.text.clone(),
            usage: c.usage,
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&record).expect("plain data serializes");
        line.push('\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes()).map_err(|e| LlmError::Transcript(e.to_string()))?;
        Ok(c)
    }

    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn sequential(&self) -> bool {
        self.inner.sequential()
    }
}

// ---------------------------------------------------------------------------
// http

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub cap: Duration,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_secs(1), cap: Duration::from_secs(30), max_attempts: 5 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `k` (0-based).
    pub fn backoff(&self, k: u32) -> Duration {
        let factor = 1u32.checked_shl(k.min(31)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// Client for an OpenAI-style `chat/completions` endpoint.
pub struct HttpProvider {
    endpoint: String,
    key: Option<String>,
    model: String,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("key", &self.key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, model: impl Into<String>, retry: RetryPolicy) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpProvider { endpoint: endpoint.into(), key, model: model.into(), retry, client })
    }

    /// Reads endpoint, key and model from the environment. `model` is used
    /// when the model variable is unset.
    pub fn from_env(model: &str, retry: RetryPolicy) -> Result<Self, LlmError> {
        let endpoint =
            std::env::var(ENV_ENDPOINT).map_err(|_| LlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| model.to_owned());
        Self::new(endpoint, key, model, retry)
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<Completion, LlmError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(k) = &self.key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.without_url().to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after_ms = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|s| (s * 1000.0) as u64);
            return Err(LlmError::RateLimited { retry_after_ms });
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::Status { status: status.as_u16(), body: body.chars().take(500).collect() });
        }
        let wire: WireResponse = resp.json().map_err(|e| LlmError::Transport(format!("bad response body: {e}")))?;
        let text = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("response has no message content".into()))?;
        Ok(Completion { text, usage: wire.usage })
    }
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Transport(_) | LlmError::RateLimited { .. } => true,
        LlmError::Status { status, .. } => *status >= 500,
        _ => false,
    }
}

impl Provider for HttpProvider {
    fn complete(&self, messages: &[ChatMessage], cfg: &GenerationConfig, tag: CallTag) -> Result<Completion, LlmError> {
        let model = if cfg.model_name.is_empty() { &self.model } else { &cfg.model_name };
        let body = WireRequest {
            model,
            messages,
            temperature: cfg.temperature,
            max_tokens: cfg.max_output_tokens,
            top_p: cfg.top_p,
        };
        debug!("request {tag}: {messages:?}");
        let mut k = 0;
        loop {
            info!("llm call {tag}: http attempt {}", k + 1);
            match self.attempt(&body) {
                Ok(c) => return Ok(c),
                Err(e) if retryable(&e) && k + 1 < self.retry.max_attempts => {
                    let mut wait = self.retry.backoff(k);
                    if let LlmError::RateLimited { retry_after_ms: Some(ms) } = e {
                        wait = wait.max(Duration::from_millis(ms)).min(self.retry.cap);
                    }
                    warn!("llm call {tag} failed ({e}); retrying in {wait:?}");
                    thread::sleep(wait);
                    k += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn kind(&self) -> &'static str {
        "http"
    }
}

// ---------------------------------------------------------------------------
// sampling

/// Response text that failed extraction or parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedResponse {
    pub slot: u32,
    pub attempt: u32,
    pub response: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SampledSource {
    pub slot: u32,
    pub attempt: u32,
    pub response: String,
    pub source: RewardSource,
    pub compiled: CompiledReward,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, Default)]
pub struct SampleOutcome {
    /// Valid candidates in slot order.
    pub sources: Vec<SampledSource>,
    pub rejected: Vec<RejectedResponse>,
    /// Slots that ended without a valid candidate.
    pub shortfall: usize,
    /// Provider errors that ended a slot early.
    pub provider_errors: Vec<(u32, LlmError)>,
}

/// Extracts and parses one response.
pub fn validate_response(
    text: &str,
    arity: Arity,
    ctx: &ParseContext,
) -> Result<(RewardSource, CompiledReward), String> {
    let source = extract_code_block(text, arity).map_err(|e| e.to_string())?;
    let compiled = parse(&source, ctx).map_err(|e| e.to_string())?;
    Ok((source, compiled))
}

enum SlotResult {
    Valid(SampledSource, Vec<RejectedResponse>),
    Failed(Vec<RejectedResponse>, Option<LlmError>),
}

fn sample_slot(
    provider: &dyn Provider,
    messages: &[ChatMessage],
    cfg: &GenerationConfig,
    ctx: &ParseContext,
    round: u32,
    slot: u32,
    retry_budget: u32,
) -> SlotResult {
    let mut rejected = Vec::new();
    for attempt in 0..=retry_budget {
        let tag = CallTag { round, slot, stage: CallStage::Generate, attempt };
        let c = match provider.complete(messages, cfg, tag) {
            Ok(c) => c,
            Err(e) => return SlotResult::Failed(rejected, Some(e)),
        };
        match validate_response(&c.text, ctx.arity, ctx) {
            Ok((source, compiled)) => {
                return SlotResult::Valid(
                    SampledSource { slot, attempt, response: c.text, source, compiled, usage: c.usage },
                    rejected,
                )
            }
            Err(reason) => {
                info!("slot {slot} attempt {attempt} rejected: {reason}");
                rejected.push(RejectedResponse { slot, attempt, response: c.text, reason });
            }
        }
    }
    SlotResult::Failed(rejected, None)
}

/// Issues `n` independent completions of `prompt`, retrying unparseable
/// responses up to `retry_budget` times per slot.
pub fn sample_candidates(
    provider: &dyn Provider,
    prompt: &str,
    n: usize,
    cfg: &GenerationConfig,
    ctx: &ParseContext,
    retry_budget: u32,
    round: u32,
) -> SampleOutcome {
    let messages = [ChatMessage::user(prompt)];
    let run = |slot: usize| sample_slot(provider, &messages, cfg, ctx, round, slot as u32, retry_budget);
    let results: Vec<SlotResult> =
        if provider.sequential() { (0..n).map(run).collect() } else { (0..n).into_par_iter().map(run).collect() };
    let mut out = SampleOutcome::default();
    for (slot, r) in results.into_iter().enumerate() {
        match r {
            SlotResult::Valid(s, rej) => {
                out.rejected.extend(rej);
                out.sources.push(s);
            }
            SlotResult::Failed(rej, err) => {
                out.rejected.extend(rej);
                out.shortfall += 1;
                if let Some(e) = err {
                    out.provider_errors.push((slot as u32, e));
                }
            }
        }
    }
    out
}

//! Completion backends behind one interface, with a content-addressed
//! response cache.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat-completions wire shape.
//! [`ScriptedBackend`] answers deterministically: from an answer key
//! (oracle), from a recorded transcript, or from a rule function.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::{parse_labeled_segments, SroieAnswer};
use crate::render::{labeled_record, PT_LAYOUT, PT_SROIE, Q_MARK};
use crate::types::{BBox, Document};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const TRANSCRIPT_FORMAT: &str = "docicl-transcript";
pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no transcript entry for prompt hash {hash}")]
    UnknownTranscriptPrompt { hash: String },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("malformed response: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LlmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
    #[serde(default)]
    pub tag: String,
}

impl CompletionRequest {
    /// Greedy decoding (temperature 0) with the default output budget.
    pub fn new(prompt: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            model: model.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            stop: Vec::new(),
            tag: String::new(),
        }
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    /// Content address of the request: prompt, model, temperature, output budget.
    pub fn cache_key(&self) -> String {
        let material =
            serde_json::json!([self.prompt, self.model, format!("{:?}", self.temperature), self.max_output_tokens]);
        sha256_hex(material.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub backend_id: String,
}

/// Raw output of a backend before caching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    pub finish_reason: String,
}

impl Generated {
    pub fn stop(text: impl Into<String>) -> Self {
        Self { text: text.into(), finish_reason: "stop".into() }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, req: &CompletionRequest) -> Result<Generated>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn prompt_hash(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

fn strip_trailing_stop(mut text: String, stop: &[String]) -> String {
    for s in stop {
        if !s.is_empty() && text.ends_with(s.as_str()) {
            text.truncate(text.len() - s.len());
            break;
        }
    }
    text
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub path: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub connect_timeout_secs: u64,
    pub read_timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            backoff_base_ms: 500,
            connect_timeout_secs: 15,
            read_timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ReplyMessage>,
    /// Legacy completions endpoints return `text` instead of `message`.
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(Duration::from_secs(config.connect_timeout_secs))
            .timeout(Duration::from_secs(config.read_timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key })
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.config.path)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms.saturating_mul(1 << attempt.min(16));
        let jitter = (rand::random::<f64>() * self.config.backoff_base_ms as f64) as u64;
        Duration::from_millis(base + jitter)
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.url())
    }

    fn generate(&self, req: &CompletionRequest) -> Result<Generated> {
        let body = ChatBody {
            model: &req.model,
            messages: [ChatMessage { role: "user", content: &req.prompt }],
            temperature: req.temperature,
            max_tokens: req.max_output_tokens,
            stop: &req.stop,
        };
        let payload = serde_json::to_vec(&body).map_err(|e| LlmError::Format(e.to_string()))?;
        let mut attempt = 0u32;
        loop {
            let mut rb = self
                .client
                .post(self.url())
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(payload.clone());
            if let Some(k) = &self.api_key {
                rb = rb.bearer_auth(k);
            }
            let retryable: LlmError = match rb.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
                    match status {
                        200..=299 => return parse_reply(&text, &req.stop),
                        401 | 403 => return Err(LlmError::Auth { status }),
                        429 => LlmError::RateLimited { attempts: attempt + 1 },
                        500..=599 => LlmError::Http { status, body: text },
                        _ => return Err(LlmError::Http { status, body: text }),
                    }
                }
                Err(e) => LlmError::Transport(e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(retryable);
            }
            log::warn!("completion attempt {} failed ({retryable}); retrying", attempt + 1);
            std::thread::sleep(self.backoff(attempt));
            attempt += 1;
        }
    }
}

fn parse_reply(body: &str, stop: &[String]) -> Result<Generated> {
    let reply: ChatReply = serde_json::from_str(body).map_err(|e| LlmError::Format(e.to_string()))?;
    let choice = reply.choices.into_iter().next().ok_or_else(|| LlmError::Format("no choices".into()))?;
    let text = choice
        .message
        .and_then(|m| m.content)
        .or(choice.text)
        .ok_or_else(|| LlmError::Format("choice has no content".into()))?;
    Ok(Generated {
        text: strip_trailing_stop(text, stop),
        finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
    })
}

// ---------------------------------------------------------------------------
// Scripted backends

/// Gold labels keyed by `(text, box)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerKey {
    labels: HashMap<(String, BBox), String>,
    pub other_label: String,
}

impl AnswerKey {
    pub fn new(other_label: impl Into<String>) -> Self {
        Self { labels: HashMap::new(), other_label: other_label.into() }
    }

    /// Key built from gold labels; the first occurrence of a `(text, box)` pair wins.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>, other_label: &str) -> Self {
        let mut key = Self::new(other_label);
        for d in docs {
            for s in &d.segments {
                if let Some(l) = &s.gold_label {
                    key.labels.entry((s.text.clone(), s.bbox)).or_insert_with(|| l.clone());
                }
            }
        }
        key
    }

    pub fn set(&mut self, text: &str, bbox: BBox, label: &str) {
        self.labels.insert((text.to_string(), bbox), label.to_string());
    }

    pub fn get(&self, text: &str, bbox: &BBox) -> Option<&str> {
        self.labels.get(&(text.to_string(), *bbox)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Final question block of a prompt: everything after the last `Q:` that
/// starts a line.
pub fn final_question(prompt: &str) -> &str {
    match prompt.rfind(&format!("\n{Q_MARK}")) {
        Some(i) => &prompt[i + 1 + Q_MARK.len()..],
        None => prompt.strip_prefix(Q_MARK).unwrap_or(prompt),
    }
}

/// Rule-based description of where each labeled record sits, in the style
/// of the positional answers: page corner for the first, then relative to
/// an earlier record on the same line (`on the right of`) or above it
/// (`below`).
pub fn describe_layout(records: &[(String, BBox, String)]) -> String {
    let mut lines = Vec::with_capacity(records.len());
    for (i, (text, bx, label)) in records.iter().enumerate() {
        let earlier = &records[..i];
        let same_line =
            earlier.iter().rev().find(|(_, o, _)| o.y0() <= bx.y1() && bx.y0() <= o.y1() && o.x1() <= bx.x0());
        let above = earlier.iter().rev().find(|(_, o, _)| o.y1() <= bx.y0() && o.x0() <= bx.x1() && bx.x0() <= o.x1());
        let place = match (same_line, above) {
            (Some((t, _, _)), _) => format!("is located on the right of \"{t}\""),
            (None, Some((t, _, _))) => format!("is located below \"{t}\""),
            (None, None) => {
                let cx = (bx.x0() + bx.x1()) / 2;
                let cy = (bx.y0() + bx.y1()) / 2;
                let vert = if cy < 333 {
                    "upper"
                } else if cy < 667 {
                    "middle"
                } else {
                    "lower"
                };
                let horiz = if cx < 500 { "left" } else { "right" };
                format!("is located in the {vert} {horiz} corner")
            }
        };
        lines.push(format!("\"{text}\" {place} with a Box of {bx}, so it can be labeled as \"{label}\"."));
    }
    let mut s = lines.join("\n");
    s.push('\n');
    s
}

/// Default rule for layout prompts: describe the labeled records of the final question.
pub fn layout_template(prompt: &str) -> String {
    let q = final_question(prompt);
    let parsed = parse_labeled_segments(q);
    let recs: Vec<(String, BBox, String)> =
        parsed.entities.into_iter().filter_map(|e| e.bbox.map(|b| (e.text, b, e.label))).collect();
    describe_layout(&recs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt_hash: String,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: HashMap<String, TranscriptEntry>,
    order: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TranscriptHeader {
    format: String,
    version: u32,
}

impl Transcript {
    pub fn insert(&mut self, prompt: &str, response: &str) {
        let h = prompt_hash(prompt);
        if !self.entries.contains_key(&h) {
            self.order.push(h.clone());
        }
        self.entries
            .insert(h.clone(), TranscriptEntry { prompt_hash: h, prompt: prompt.into(), response: response.into() });
    }

    pub fn get(&self, hash: &str) -> Option<&TranscriptEntry> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.order.iter().map(|h| &self.entries[h])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        let header = TranscriptHeader { format: TRANSCRIPT_FORMAT.into(), version: TRANSCRIPT_VERSION };
        writeln!(f, "{}", serde_json::to_string(&header).unwrap())?;
        for e in self.entries() {
            writeln!(f, "{}", serde_json::to_string(e).unwrap())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut lines = f.lines();
        let header: TranscriptHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| LlmError::Format(e.to_string()))?,
            None => return Err(LlmError::Format("empty transcript file".into())),
        };
        if header.format != TRANSCRIPT_FORMAT || header.version != TRANSCRIPT_VERSION {
            return Err(LlmError::Format(format!("unsupported transcript {} v{}", header.format, header.version)));
        }
        let mut t = Transcript::default();
        for l in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let e: TranscriptEntry = serde_json::from_str(&l).map_err(|e| LlmError::Format(e.to_string()))?;
            t.insert(&e.prompt, &e.response);
        }
        Ok(t)
    }
}

pub type TemplateFn = Arc<dyn Fn(&str) -> String + Send + Sync>;

#[derive(Clone)]
pub enum ScriptedMode {
    /// Answers labeling questions from the key and layout questions from
    /// [`layout_template`].
    Oracle(AnswerKey),
    Transcript(Transcript),
    Template {
        name: String,
        rule: TemplateFn,
    },
}

#[derive(Clone)]
pub struct ScriptedBackend {
    mode: ScriptedMode,
}

impl ScriptedBackend {
    pub fn oracle(key: AnswerKey) -> Self {
        Self { mode: ScriptedMode::Oracle(key) }
    }

    pub fn transcript(t: Transcript) -> Self {
        Self { mode: ScriptedMode::Transcript(t) }
    }

    pub fn template(name: impl Into<String>, rule: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self { mode: ScriptedMode::Template { name: name.into(), rule: Arc::new(rule) } }
    }

    /// Template backend producing positional descriptions.
    pub fn layout() -> Self {
        Self::template("layout", layout_template)
    }

    pub fn mode(&self) -> &ScriptedMode {
        &self.mode
    }
}

/// What an answer key says about the final question of `prompt`.
pub fn oracle_answer(key: &AnswerKey, prompt: &str) -> String {
    let q = final_question(prompt);
    if q.contains(PT_LAYOUT) {
        return layout_template(prompt);
    }
    let parsed = parse_labeled_segments(q);
    let label_of = |text: &str, b: Option<BBox>| -> String {
        b.and_then(|b| key.get(text, &b)).unwrap_or(&key.other_label).to_string()
    };
    if q.contains(PT_SROIE) {
        let mut a = SroieAnswer::default();
        for r in &parsed.queries {
            let l = label_of(&r.text, r.bbox);
            if let Some(f) = a.field_mut(&l) {
                f.push(r.text.clone());
            }
        }
        return a.render();
    }
    let mut out: String = parsed
        .queries
        .iter()
        .filter_map(|r| r.bbox.map(|b| labeled_record(&r.text, &b, &label_of(&r.text, Some(b)))))
        .collect();
    out.push('.');
    out
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        match &self.mode {
            ScriptedMode::Oracle(_) => "scripted:oracle".into(),
            ScriptedMode::Transcript(_) => "scripted:transcript".into(),
            ScriptedMode::Template { name, .. } => format!("scripted:template:{name}"),
        }
    }

    fn generate(&self, req: &CompletionRequest) -> Result<Generated> {
        match &self.mode {
            ScriptedMode::Oracle(key) => Ok(Generated::stop(oracle_answer(key, &req.prompt))),
            ScriptedMode::Transcript(t) => {
                let h = prompt_hash(&req.prompt);
                t.get(&h)
                    .map(|e| Generated::stop(e.response.clone()))
                    .ok_or(LlmError::UnknownTranscriptPrompt { hash: h })
            }
            ScriptedMode::Template { rule, .. } => Ok(Generated::stop(rule(&req.prompt))),
        }
    }
}

/// Wraps a backend and records every generated response into a transcript.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Transcript>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Transcript::default()) }
    }

    pub fn transcript(&self) -> Transcript {
        self.log.lock().unwrap().clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, req: &CompletionRequest) -> Result<Generated> {
        let g = self.inner.generate(req)?;
        self.log.lock().unwrap().insert(&req.prompt, &g.text);
        Ok(g)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, req: &CompletionRequest) -> Result<Generated> {
        (**self).generate(req)
    }
}

// ---------------------------------------------------------------------------
// Cache and client

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedEntry {
    key: String,
    text: String,
    finish_reason: String,
    backend_id: String,
}

/// Responses keyed by request content address. With a directory, entries
/// persist one file per key.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, CachedEntry>>,
    stats: Mutex<CacheStats>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: RwLock::new(HashMap::new()),
            stats: Mutex::new(CacheStats::default()),
            key_locks: Mutex::default(),
        }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::in_memory() })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn lookup(&self, key: &str) -> Option<CachedEntry> {
        if let Some(e) = self.mem.read().unwrap().get(key) {
            return Some(e.clone());
        }
        let p = self.path(key)?;
        let raw = fs::read_to_string(p).ok()?;
        let e: CachedEntry = serde_json::from_str(&raw).ok()?;
        self.mem.write().unwrap().insert(key.to_string(), e.clone());
        Some(e)
    }

    fn store(&self, e: CachedEntry) -> Result<()> {
        if let Some(p) = self.path(&e.key) {
            let tmp = p.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&e).unwrap())?;
            fs::rename(tmp, p)?;
        }
        self.stats.lock().unwrap().bytes += e.text.len() as u64;
        self.mem.write().unwrap().insert(e.key.clone(), e);
        Ok(())
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks.lock().unwrap().entry(key.to_string()).or_default().clone()
    }

    pub fn stats(&self) -> CacheStats {
        *self.stats.lock().unwrap()
    }

    /// Drop every entry (memory and disk) and reset the counters.
    pub fn clear(&self) -> Result<()> {
        self.mem.write().unwrap().clear();
        if let Some(d) = &self.dir {
            for entry in fs::read_dir(d)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "json") {
                    fs::remove_file(p)?;
                }
            }
        }
        *self.stats.lock().unwrap() = CacheStats::default();
        Ok(())
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shareable completion client: cache interposed in front of a backend,
/// with bounded in-flight requests.
pub struct LlmClient {
    backend: Box<dyn Backend>,
    cache: ResponseCache,
    gate: Semaphore,
    pub model: String,
    pub max_output_tokens: u32,
}

impl LlmClient {
    pub fn new(backend: impl Backend + 'static, model: impl Into<String>) -> Self {
        Self::with_cache(backend, model, ResponseCache::in_memory())
    }

    pub fn with_cache(backend: impl Backend + 'static, model: impl Into<String>, cache: ResponseCache) -> Self {
        Self {
            backend: Box::new(backend),
            cache,
            gate: Semaphore::new(DEFAULT_CONCURRENCY),
            model: model.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.gate = Semaphore::new(limit);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    /// Request for `prompt` using this client's model at temperature 0.
    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        let mut r = CompletionRequest::new(prompt, self.model.clone());
        r.max_output_tokens = self.max_output_tokens;
        r
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        if req.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let started = Instant::now();
        let key = req.cache_key();
        let lock = self.cache.key_lock(&key);
        let _held = lock.lock().unwrap();
        if let Some(e) = self.cache.lookup(&key) {
            self.cache.stats.lock().unwrap().hits += 1;
            return Ok(CompletionResponse {
                text: e.text,
                finish_reason: e.finish_reason,
                latency_ms: started.elapsed().as_millis() as u64,
                cache_hit: true,
                backend_id: e.backend_id,
            });
        }
        let generated = {
            let _permit = self.gate.acquire();
            self.backend.generate(req)?
        };
        self.cache.stats.lock().unwrap().misses += 1;
        let backend_id = self.backend.id();
        self.cache.store(CachedEntry {
            key,
            text: generated.text.clone(),
            finish_reason: generated.finish_reason.clone(),
            backend_id: backend_id.clone(),
        })?;
        Ok(CompletionResponse {
            text: generated.text,
            finish_reason: generated.finish_reason,
            latency_ms: started.elapsed().as_millis() as u64,
            cache_hit: false,
            backend_id,
        })
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn cache_clear(&self) -> Result<()> {
        self.cache.clear()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Dataset, Segment, Split};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);
    impl Backend for Counting {
        fn id(&self) -> String {
            "counting".into()
        }
        fn generate(&self, _req: &CompletionRequest) -> Result<Generated> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(Generated::stop("ok"))
        }
    }

    #[test]
    fn request_defaults_to_greedy() {
        let r = CompletionRequest::new("p", "m");
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.max_output_tokens, 1024);
    }

    #[test]
    fn transcript_hit_then_cache_hit() {
        let mut t = Transcript::default();
        t.insert("hello", "world");
        let c = LlmClient::new(ScriptedBackend::transcript(t), "m");
        let a = c.complete(&c.request("hello")).unwrap();
        assert_eq!((a.text.as_str(), a.cache_hit), ("world", false));
        let b = c.complete(&c.request("hello")).unwrap();
        assert_eq!((b.text.as_str(), b.cache_hit), ("world", true));
        assert!(matches!(c.complete(&c.request("other")), Err(LlmError::UnknownTranscriptPrompt { .. })));
    }

    #[test]
    fn cache_stats_lifecycle() {
        let c = LlmClient::new(Counting(AtomicUsize::new(0)), "m");
        assert_eq!(c.cache_stats(), CacheStats::default());
        c.complete(&c.request("x")).unwrap();
        c.complete(&c.request("x")).unwrap();
        let s = c.cache_stats();
        assert_eq!((s.hits, s.misses, s.bytes), (1, 1, 2));
        c.cache_clear().unwrap();
        assert_eq!(c.cache_stats(), CacheStats::default());
    }

    #[test]
    fn identical_requests_generate_once_under_concurrency() {
        let backend = Arc::new(Counting(AtomicUsize::new(0)));
        let c = Arc::new(LlmClient::new(backend.clone(), "m"));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let c = c.clone();
                s.spawn(move || c.complete(&c.request("same")).unwrap());
            }
        });
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn disk_cache_survives_client() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(Counting(AtomicUsize::new(0)));
        {
            let c = LlmClient::with_cache(backend.clone(), "m", ResponseCache::on_disk(dir.path()).unwrap());
            c.complete(&c.request("x")).unwrap();
        }
        let c = LlmClient::with_cache(backend.clone(), "m", ResponseCache::on_disk(dir.path()).unwrap());
        assert!(c.complete(&c.request("x")).unwrap().cache_hit);
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
        c.cache_clear().unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_prompt_rejected() {
        let c = LlmClient::new(Counting(AtomicUsize::new(0)), "m");
        assert!(matches!(c.complete(&c.request("  ")), Err(LlmError::EmptyPrompt)));
    }

    #[test]
    fn oracle_echoes_gold() {
        let bx = BBox::new(295, 56, 512, 79).unwrap();
        let bx2 = BBox::new(84, 109, 136, 119).unwrap();
        let doc = Document::new(
            "d",
            Dataset::Funsd,
            Split::Train,
            vec![
                Segment::new("0", "ACUTE TOXICITY IN MICE", bx).with_gold("header"),
                Segment::new("1", "COMPOUND", bx2).with_gold("question"),
            ],
        );
        let key = AnswerKey::from_documents([&doc], "other");
        let segs: Vec<&Segment> = doc.segments.iter().collect();
        let prompt = format!("stuff\n{}", crate::render::labeling_query(&segs, crate::render::PT_LABELS));
        let out = oracle_answer(&key, &prompt);
        assert_eq!(
            out,
            r#"{text:"ACUTE TOXICITY IN MICE",Box:[295 56 512 79],entity:header}{text:"COMPOUND",Box:[84 109 136 119],entity:question}."#
        );
        let parsed = parse_labeled_segments(&out);
        let (aligned, diags) =
            crate::extraction::align_predictions(&parsed.entities, &doc.segments, &crate::types::LabelSchema::funsd());
        assert!(diags.is_empty());
        assert!(aligned.iter().all(|s| s.predicted_label == s.gold_label));
    }

    #[test]
    fn layout_description_mentions_neighbors() {
        let recs = vec![
            ("TO:".to_string(), BBox::new(84, 53, 112, 67).unwrap(), "question".to_string()),
            ("R. B. SPELL".to_string(), BBox::new(147, 50, 228, 68).unwrap(), "answer".to_string()),
            ("FROM:".to_string(), BBox::new(85, 85, 134, 102).unwrap(), "question".to_string()),
        ];
        let d = describe_layout(&recs);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(
            lines[0],
            r#""TO:" is located in the upper left corner with a Box of [84 53 112 67], so it can be labeled as "question"."#
        );
        assert!(lines[1].starts_with(r#""R. B. SPELL" is located on the right of "TO:""#));
        assert!(lines[2].starts_with(r#""FROM:" is located below "TO:""#));
    }

    #[test]
    fn transcript_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut t = Transcript::default();
        t.insert("a", "1");
        t.insert("b\nc", "2");
        t.save(&p).unwrap();
        assert_eq!(Transcript::load(&p).unwrap(), t);
        fs::write(&p, "{\"format\":\"docicl-transcript\",\"version\":9}\n").unwrap();
        assert!(Transcript::load(&p).is_err());
    }

    #[test]
    fn stop_sequence_trimmed() {
        let g =
            parse_reply(r#"{"choices":[{"message":{"content":"abc END"},"finish_reason":"stop"}]}"#, &["END".into()])
                .unwrap();
        assert_eq!(g.text, "abc ");
        let g = parse_reply(r#"{"choices":[{"text":"legacy"}]}"#, &[]).unwrap();
        assert_eq!(g.text, "legacy");
        assert!(parse_reply(r#"{"choices":[]}"#, &[]).is_err());
    }
}

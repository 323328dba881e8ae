//! Chat-completion access: an OpenAI-compatible HTTP backend and a
//! deterministic mock, behind a shared retry / rate-limit layer.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::GatewayError;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_TOKENS: u32 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    /// No default model; the HTTP backend refuses an empty name.
    pub model_name: String,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_name: String::new(),
        }
    }
}

/// One single-turn completion call.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    pub params: &'a CompletionParams,
    /// Caller-chosen variation seed. Only the mock backend reads it; it is
    /// never sent over the wire.
    pub nonce: u64,
}

/// Anything that can answer a prompt with completion text.
pub trait ChatGateway: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError>;
}

/// Monotonic time source; swapped for a virtual clock in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Time only moves when someone sleeps.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

/// Sliding one-minute window admission control.
pub struct RateLimiter {
    requests_per_minute: Option<u32>,
    admitted: Mutex<VecDeque<Duration>>,
}

const WINDOW: Duration = Duration::from_secs(60);

impl RateLimiter {
    pub fn new(requests_per_minute: Option<u32>) -> Self {
        Self {
            requests_per_minute: requests_per_minute.filter(|&n| n > 0),
            admitted: Mutex::new(VecDeque::new()),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    /// Blocks (through `clock`) until a request may go out, then records it.
    pub fn acquire(&self, clock: &dyn Clock) {
        let Some(limit) = self.requests_per_minute else {
            return;
        };
        loop {
            let wait = {
                let mut admitted = self.admitted.lock().unwrap();
                let now = clock.now();
                while admitted.front().is_some_and(|&t| now >= t + WINDOW) {
                    admitted.pop_front();
                }
                if admitted.len() < limit as usize {
                    admitted.push_back(now);
                    return;
                }
                admitted[0] + WINDOW - now
            };
            clock.sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    /// Five attempts in total, 1 s base delay doubling each retry.
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 1000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay_ms as f64 * 2f64.powi(retry.saturating_sub(1) as i32);
        let factor = if self.jitter {
            1.0 + rand::thread_rng().gen_range(0.0..0.5)
        } else {
            1.0
        };
        Duration::from_secs_f64(base * factor / 1000.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

/// Telemetry for one completion call; exactly one per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayEvent {
    pub timestamp_ms: u64,
    pub prompt_chars: usize,
    pub response_chars: usize,
    pub latency_ms: u64,
    pub attempt: u32,
    pub backend: BackendKind,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A raw completion source without retries.
pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError>;
}

pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        if base_url.trim().is_empty() {
            return Err(GatewayError::Config("empty base URL".into()));
        }
        if api_key.is_empty() {
            return Err(GatewayError::Config("empty API key".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("building HTTP client: {e}")))?;
        Ok(Self {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    /// Reads the key from the environment variable `key_var`.
    pub fn from_env(base_url: &str, key_var: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let key = std::env::var(key_var)
            .map_err(|_| GatewayError::Config(format!("environment variable {key_var} is not set")))?;
        Self::new(base_url, key, timeout)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

impl CompletionBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn send(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        if request.params.model_name.is_empty() {
            return Err(GatewayError::Config("model_name is not set".into()));
        }
        let body = json!({
            "model": request.params.model_name,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::Transport(e.without_url().to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| GatewayError::Transport(e.without_url().to_string()))?;
        if !status.is_success() {
            let detail: String = text.chars().take(500).collect();
            return Err(GatewayError::Status {
                status: status.as_u16(),
                detail,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Response(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::Response("missing choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    Echo,
    Uppercase,
    Splice,
    SeededEdit,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    pub mode: MockMode,
    pub seed: u64,
}

impl MockBackend {
    pub fn new(mode: MockMode, seed: u64) -> Self {
        Self { mode, seed }
    }
}

impl CompletionBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(request.nonce.to_le_bytes());
        hasher.update(request.prompt.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        mock_transform(self.mode, request.prompt, &mut rng)
    }
}

/// Parent text segments found between `<Input>` / `<Input 1>` / `<Input 2>`
/// marker lines of an operator prompt.
pub fn parent_segments(payload: &str) -> Result<(String, Option<String>), GatewayError> {
    let first = marked_segment(payload, "<Input>", "</Input>")
        .or_else(|| marked_segment(payload, "<Input 1>", "</Input 1>"))
        .ok_or_else(|| GatewayError::Mock("payload has no parent segment".into()))?;
    let second = marked_segment(payload, "<Input 2>", "</Input 2>");
    Ok((first, second))
}

fn marked_segment(text: &str, open: &str, close: &str) -> Option<String> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim_end() == open)?;
    let mut body = Vec::new();
    for line in lines {
        if line.trim_end() == close {
            return Some(body.join("\n"));
        }
        body.push(line);
    }
    None
}

pub fn mock_transform<R: Rng + ?Sized>(
    mode: MockMode,
    payload: &str,
    rng: &mut R,
) -> Result<String, GatewayError> {
    let (parent1, parent2) = parent_segments(payload)?;
    Ok(match mode {
        MockMode::Echo => parent1,
        MockMode::Uppercase => parent1.to_uppercase(),
        MockMode::Splice => match parent2 {
            Some(p2) => splice(&parent1, &p2),
            None => parent1,
        },
        MockMode::SeededEdit => seeded_edit(&parent1, rng),
    })
}

/// First half of `a` followed by the second half of `b`, split at char midpoints.
pub fn splice(a: &str, b: &str) -> String {
    let a_half = a.chars().count() / 2;
    let b_half = b.chars().count() / 2;
    a.chars().take(a_half).chain(b.chars().skip(b_half)).collect()
}

fn synonym_groups() -> &'static HashMap<String, Vec<String>> {
    static TABLE: OnceLock<HashMap<String, Vec<String>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = HashMap::new();
        for line in include_str!("../assets/synonyms.txt").lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let group: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            for word in &group {
                let others = group.iter().filter(|w| *w != word).cloned().collect();
                table.insert(word.clone(), others);
            }
        }
        table
    })
}

/// Replaces 1 to 3 table words (distinct positions) with a random group mate.
fn seeded_edit<R: Rng + ?Sized>(text: &str, rng: &mut R) -> String {
    let table = synonym_groups();
    let mut tokens = tokenize(text);
    let mut candidates: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_word && table.contains_key(&t.core.to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    let edits = rng.gen_range(1..=3);
    for _ in 0..edits {
        if candidates.is_empty() {
            break;
        }
        let pick = candidates.remove(rng.gen_range(0..candidates.len()));
        let token = &mut tokens[pick];
        let options = &table[&token.core.to_lowercase()];
        let replacement = &options[rng.gen_range(0..options.len())];
        token.core = match_case(&token.core, replacement);
    }
    tokens
        .into_iter()
        .map(|t| format!("{}{}{}", t.lead, t.core, t.trail))
        .collect()
}

struct Token {
    is_word: bool,
    lead: String,
    core: String,
    trail: String,
}

/// Splits into whitespace runs and words; words keep surrounding punctuation
/// in `lead` / `trail` so rejoining reproduces the input exactly.
fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        let ws = c.is_whitespace();
        let mut run = String::new();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() != ws {
                break;
            }
            run.push(c);
            chars.next();
        }
        if ws {
            out.push(Token {
                is_word: false,
                lead: String::new(),
                core: run,
                trail: String::new(),
            });
        } else {
            let start = run.find(|c: char| c.is_alphanumeric()).unwrap_or(run.len());
            let end = run
                .rfind(|c: char| c.is_alphanumeric())
                .map_or(start, |i| i + run[i..].chars().next().unwrap().len_utf8());
            out.push(Token {
                is_word: start < end,
                lead: run[..start].to_owned(),
                core: run[start..end.max(start)].to_owned(),
                trail: run[end.max(start)..].to_owned(),
            });
        }
    }
    out
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().all(|c| !c.is_lowercase()) && original.chars().count() > 1 {
        return replacement.to_uppercase();
    }
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = replacement.chars();
        return chars
            .next()
            .map(|c| c.to_uppercase().chain(chars).collect())
            .unwrap_or_default();
    }
    replacement.to_owned()
}

/// The retrying, rate-limited front door shared by all operator calls.
pub struct Gateway {
    backend: Box<dyn CompletionBackend>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    events: Mutex<Vec<GatewayEvent>>,
    event_log: Option<Mutex<BufWriter<File>>>,
}

impl Gateway {
    pub fn new(backend: Box<dyn CompletionBackend>, retry: RetryPolicy, limiter: RateLimiter) -> Self {
        Self {
            backend,
            retry,
            limiter,
            clock: Arc::new(SystemClock::default()),
            events: Mutex::new(Vec::new()),
            event_log: None,
        }
    }

    pub fn mock(mode: MockMode, seed: u64) -> Self {
        Self::new(
            Box::new(MockBackend::new(mode, seed)),
            RetryPolicy::default(),
            RateLimiter::unlimited(),
        )
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Appends every event as a JSON line to `path`.
    pub fn with_event_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.event_log = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn events(&self) -> Vec<GatewayEvent> {
        self.events.lock().unwrap().clone()
    }

    fn emit(&self, event: GatewayEvent) {
        if let Some(log) = &self.event_log {
            let mut w = log.lock().unwrap();
            if let Ok(line) = serde_json::to_string(&event) {
                let _ = writeln!(w, "{line}");
                let _ = w.flush();
            }
        }
        self.events.lock().unwrap().push(event);
    }
}

impl ChatGateway for Gateway {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        if request.prompt.is_empty() {
            return Err(GatewayError::Config("empty prompt".into()));
        }
        let started = self.clock.now();
        let max_attempts = 1 + self.retry.max_retries;
        let mut attempt = 0;
        let result = loop {
            attempt += 1;
            self.limiter.acquire(self.clock.as_ref());
            match self.backend.send(request) {
                Ok(text) => break Ok(text),
                Err(e) if e.is_transient() && attempt < max_attempts => {
                    log::debug!("transient gateway failure on attempt {attempt}: {e}");
                    self.clock.sleep(self.retry.delay(attempt));
                }
                Err(e) if e.is_transient() => {
                    break Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => break Err(e),
            }
        };
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        self.emit(GatewayEvent {
            timestamp_ms,
            prompt_chars: request.prompt.chars().count(),
            response_chars: result.as_ref().map_or(0, |t| t.chars().count()),
            latency_ms: (self.clock.now().saturating_sub(started)).as_millis() as u64,
            attempt,
            backend: self.backend.kind(),
            ok: result.is_ok(),
            error: result.as_ref().err().map(ToString::to_string),
        });
        result
    }
}

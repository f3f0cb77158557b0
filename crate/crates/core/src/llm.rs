//! Chat-completion provider boundary: a live OpenAI-compatible HTTP client,
//! a deterministic scripted provider for hermetic runs, retry with backoff,
//! a global in-flight limit, and token accounting.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

impl ChatRequest {
    /// Deterministic decoding (temperature 0) over a single user message.
    pub fn user(model: &str, content: impl Into<String>) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.0,
            max_output_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("provider timed out")]
    Timeout,
    #[error("provider rate limited the request")]
    RateLimited,
    #[error("bad provider response: {0}")]
    BadResponse(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

impl LlmError {
    /// Timeouts, rate limits and transport failures are worth retrying;
    /// a well-formed but unusable response is not.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, LlmError::BadResponse(_))
    }
}

/// The provider contract. Implementations must be shareable across query
/// workers.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
    fn id(&self) -> &str;
}

/// Stable fingerprint of (model, concatenated message contents): the first
/// 16 hex characters of a SHA-256 digest. Scripted fixtures key on this.
pub fn request_fingerprint(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(request.model.as_bytes());
    hasher.update([0x1f]);
    for message in &request.messages {
        hasher.update(message.content.as_bytes());
        hasher.update([0x1e]);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests and scripted runs.
    pub fn immediate(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            initial_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
        }
    }
}

/// Call the provider, retrying timeouts, rate limits and transport failures
/// with exponential backoff and jitter. `BadResponse` is returned
/// immediately; parse-level retries belong to callers.
pub fn complete_with_retry(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
    policy: &RetryPolicy,
) -> Result<ChatResponse, LlmError> {
    let attempts = policy.max_attempts.max(1);
    let mut delay = policy.initial_backoff;
    for attempt in 1..=attempts {
        match provider.complete(request) {
            Ok(response) => return Ok(response),
            Err(err) if err.is_retryable() && attempt < attempts => {
                let jitter = if delay.is_zero() {
                    Duration::ZERO
                } else {
                    Duration::from_millis(rand::thread_rng().gen_range(0..=delay.as_millis() as u64 / 2))
                };
                std::thread::sleep((delay + jitter).min(policy.max_backoff));
                delay = (delay * 2).min(policy.max_backoff);
            }
            Err(err) => return Err(err),
        }
    }
    unreachable!("retry loop returns on the final attempt")
}

/// Deterministic provider mapping request fingerprints to canned responses.
/// Token counts are whitespace-token counts of the prompt and the response.
/// A miss reports its fingerprint so fixtures can be completed.
#[derive(Debug, Default, Clone)]
pub struct ScriptedProvider {
    script: HashMap<String, String>,
}

impl ScriptedProvider {
    pub fn new() -> ScriptedProvider {
        ScriptedProvider::default()
    }

    pub fn from_map(script: HashMap<String, String>) -> ScriptedProvider {
        ScriptedProvider { script }
    }

    /// Load a JSON object `{fingerprint: response_text}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<ScriptedProvider, LlmError> {
        let bytes = fs::read(path.as_ref())
            .map_err(|e| LlmError::Transport(format!("cannot read script: {e}")))?;
        let script: HashMap<String, String> = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::BadResponse(format!("malformed script file: {e}")))?;
        Ok(ScriptedProvider { script })
    }

    /// Script the response to `request`.
    pub fn add(&mut self, request: &ChatRequest, response: impl Into<String>) {
        self.script.insert(request_fingerprint(request), response.into());
    }

    /// Script the response to a single-user-message request for `model`.
    pub fn add_user(&mut self, model: &str, prompt: &str, response: impl Into<String>) {
        self.add(&ChatRequest::user(model, prompt), response);
    }

    pub fn entries(&self) -> &HashMap<String, String> {
        &self.script
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let fingerprint = request_fingerprint(request);
        match self.script.get(&fingerprint) {
            Some(text) => Ok(ChatResponse {
                text: text.clone(),
                prompt_tokens: request
                    .messages
                    .iter()
                    .map(|m| whitespace_tokens(&m.content))
                    .sum(),
                completion_tokens: whitespace_tokens(text),
                provider_id: "scripted".into(),
            }),
            None => Err(LlmError::BadResponse(format!(
                "no scripted response for fingerprint {fingerprint}"
            ))),
        }
    }

    fn id(&self) -> &str {
        "scripted"
    }
}

/// Live OpenAI-compatible chat-completions client (bearer-token auth).
pub struct HttpChatProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    provider_id: String,
}

impl HttpChatProvider {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        request_timeout: Duration,
    ) -> Result<HttpChatProvider, LlmError> {
        let base_url = base_url.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(request_timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let provider_id = format!("http:{base_url}");
        Ok(HttpChatProvider {
            client,
            base_url,
            api_key,
            provider_id,
        })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if status.as_u16() == 408 || status.as_u16() == 504 {
            return Err(LlmError::Timeout);
        }
        if !status.is_success() {
            return Err(LlmError::Transport(format!("status {status}")));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| LlmError::BadResponse(format!("malformed body: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::BadResponse("no choices in response".into()))?;
        let text = choice.message.content;
        // Prefer provider-reported usage; whitespace counts are only an
        // accounting approximation when it is absent.
        let usage = wire.usage.unwrap_or(WireUsage {
            prompt_tokens: None,
            completion_tokens: None,
        });
        let prompt_tokens = usage.prompt_tokens.unwrap_or_else(|| {
            request.messages.iter().map(|m| whitespace_tokens(&m.content)).sum()
        });
        let completion_tokens = usage.completion_tokens.unwrap_or_else(|| whitespace_tokens(&text));
        Ok(ChatResponse {
            text,
            prompt_tokens,
            completion_tokens,
            provider_id: self.provider_id.clone(),
        })
    }

    fn id(&self) -> &str {
        &self.provider_id
    }
}

/// Counting semaphore used to cap in-flight LLM calls globally.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Semaphore {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.cv.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphoreGuard(self)
    }
}

pub struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.0.cv.notify_one();
    }
}

/// Caps concurrent calls to the wrapped provider.
pub struct ConcurrencyLimited<P> {
    inner: P,
    semaphore: Arc<Semaphore>,
}

impl<P: ChatProvider> ConcurrencyLimited<P> {
    pub fn new(inner: P, semaphore: Arc<Semaphore>) -> Self {
        ConcurrencyLimited { inner, semaphore }
    }
}

impl<P: ChatProvider> ChatProvider for ConcurrencyLimited<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.semaphore.acquire();
        self.inner.complete(request)
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Counts completed calls; used for cost-bound and short-circuit assertions.
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: ChatProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: ChatProvider> ChatProvider for CountingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Appends one JSONL record per call for audit and replay.
pub struct RecordingProvider<P> {
    inner: P,
    sink: Mutex<std::fs::File>,
}

#[derive(Serialize)]
struct LedgerRecord<'a> {
    fingerprint: String,
    model: &'a str,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn create(inner: P, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let sink = std::fs::File::create(path)?;
        Ok(RecordingProvider {
            inner,
            sink: Mutex::new(sink),
        })
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let result = self.inner.complete(request);
        let record = LedgerRecord {
            fingerprint: request_fingerprint(request),
            model: &request.model,
            messages: &request.messages,
            response: result.as_ref().ok().map(|r| r.text.as_str()),
            error: result.as_ref().err().map(|e| e.to_string()),
            prompt_tokens: result.as_ref().map(|r| r.prompt_tokens).unwrap_or(0),
            completion_tokens: result.as_ref().map(|r| r.completion_tokens).unwrap_or(0),
        };
        if let Ok(mut sink) = self.sink.lock() {
            if let Ok(line) = serde_json::to_string(&record) {
                let _ = writeln!(sink, "{line}");
            }
        }
        result
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}

/// Aggregated token usage over a set of calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsageLedger {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageLedger {
    pub fn record(&mut self, response: &ChatResponse) {
        self.calls += 1;
        self.prompt_tokens += response.prompt_tokens;
        self.completion_tokens += response.completion_tokens;
    }

    pub fn mean_prompt_tokens(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.prompt_tokens as f64 / self.calls as f64
        }
    }

    pub fn mean_completion_tokens(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.completion_tokens as f64 / self.calls as f64
        }
    }

    pub fn merged(self, other: UsageLedger) -> UsageLedger {
        UsageLedger {
            calls: self.calls + other.calls,
            prompt_tokens: self.prompt_tokens + other.prompt_tokens,
            completion_tokens: self.completion_tokens + other.completion_tokens,
        }
    }
}

/// Exact sums and means over a slice of responses.
pub fn usage_ledger(responses: &[ChatResponse]) -> UsageLedger {
    let mut ledger = UsageLedger::default();
    for response in responses {
        ledger.record(response);
    }
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(content: &str) -> ChatRequest {
        ChatRequest::user("m", content)
    }

    fn resp(p: u64, c: u64) -> ChatResponse {
        ChatResponse {
            text: "x".into(),
            prompt_tokens: p,
            completion_tokens: c,
            provider_id: "t".into(),
        }
    }

    #[test]
    fn scripted_hit_round_trip() {
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", "hello there world", "two words");
        let out = provider.complete(&req("hello there world")).unwrap();
        assert_eq!(out.text, "two words");
        assert_eq!(out.prompt_tokens, 3);
        assert_eq!(out.completion_tokens, 2);
    }

    #[test]
    fn scripted_miss_names_fingerprint() {
        let provider = ScriptedProvider::new();
        let request = req("nothing scripted");
        let err = provider.complete(&request).unwrap_err();
        match err {
            LlmError::BadResponse(msg) => {
                assert!(msg.contains(&request_fingerprint(&request)), "{msg}");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn scripted_is_deterministic() {
        let mut provider = ScriptedProvider::new();
        provider.add_user("m", "q", "a");
        let a = provider.complete(&req("q")).unwrap();
        let b = provider.complete(&req("q")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_depends_on_model_and_content() {
        let a = request_fingerprint(&ChatRequest::user("m1", "same"));
        let b = request_fingerprint(&ChatRequest::user("m2", "same"));
        let c = request_fingerprint(&ChatRequest::user("m1", "other"));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }

    /// Fails `failures` times with a transport error, then succeeds.
    struct FlakyProvider {
        failures: AtomicUsize,
        calls: AtomicUsize,
    }

    impl FlakyProvider {
        fn new(failures: usize) -> Self {
            FlakyProvider {
                failures: AtomicUsize::new(failures),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ChatProvider for FlakyProvider {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1))
                .is_ok()
            {
                Err(LlmError::Transport("flaky".into()))
            } else {
                Ok(resp(1, 1))
            }
        }

        fn id(&self) -> &str {
            "flaky"
        }
    }

    #[test]
    fn retry_succeeds_first_try_with_one_call() {
        let provider = FlakyProvider::new(0);
        complete_with_retry(&provider, &req("q"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_fail_fail_succeed_uses_three_calls() {
        let provider = FlakyProvider::new(2);
        complete_with_retry(&provider, &req("q"), &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_exhaustion_returns_final_error() {
        let provider = FlakyProvider::new(10);
        let err = complete_with_retry(&provider, &req("q"), &RetryPolicy::immediate(3)).unwrap_err();
        assert_eq!(err, LlmError::Transport("flaky".into()));
        assert_eq!(provider.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn bad_response_is_not_retried() {
        let provider = ScriptedProvider::new(); // every request misses
        let counting = CountingProvider::new(provider);
        let err = complete_with_retry(&counting, &req("q"), &RetryPolicy::immediate(3)).unwrap_err();
        assert!(matches!(err, LlmError::BadResponse(_)));
        assert_eq!(counting.calls(), 1);
    }

    #[test]
    fn ledger_sums_and_means() {
        assert_eq!(usage_ledger(&[]), UsageLedger::default());
        let l = usage_ledger(&[resp(10, 2), resp(20, 4)]);
        assert_eq!(l.calls, 2);
        assert_eq!(l.mean_prompt_tokens(), 15.0);
        assert_eq!(l.mean_completion_tokens(), 3.0);
        let single = usage_ledger(&[resp(7, 3)]);
        assert_eq!(single.prompt_tokens, 7);
        assert_eq!(single.completion_tokens, 3);
    }

    #[test]
    fn ledger_is_additive() {
        let a = [resp(1, 2), resp(3, 4)];
        let b = [resp(5, 6)];
        let both: Vec<ChatResponse> = a.iter().chain(b.iter()).cloned().collect();
        assert_eq!(usage_ledger(&both), usage_ledger(&a).merged(usage_ledger(&b)));
    }

    /// Records the maximum number of concurrently running calls.
    struct HighWaterProvider {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatProvider for HighWaterProvider {
        fn complete(&self, _request: &ChatRequest) -> Result<ChatResponse, LlmError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(resp(1, 1))
        }

        fn id(&self) -> &str {
            "highwater"
        }
    }

    #[test]
    fn concurrency_limit_is_enforced() {
        let limit = 3;
        let provider = Arc::new(ConcurrencyLimited::new(
            HighWaterProvider {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            Arc::new(Semaphore::new(limit)),
        ));
        let mut handles = Vec::new();
        for i in 0..16 {
            let p = Arc::clone(&provider);
            handles.push(std::thread::spawn(move || {
                p.complete(&req(&format!("q{i}"))).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(provider.inner.peak.load(Ordering::SeqCst) <= limit);
        assert!(provider.inner.peak.load(Ordering::SeqCst) >= 1);
    }
}

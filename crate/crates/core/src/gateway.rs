//! Access to an OpenAI-compatible vision chat endpoint.
//!
//! [`Gateway`] owns admission control and retries; backends only perform a
//! single attempt. The request body puts the image part before the text part
//! so the prompt reads as a question about the image that precedes it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::model::{ContentDigest, GenerationParams, LoadedImage};
use crate::prompt::RenderedPrompt;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("auth env var {var} is not set or empty")]
    MissingAuth { var: String },
    #[error("endpoint rejected the request with status {status}: {body}")]
    PermanentHttp { status: u16, body: String },
    #[error("gave up after {attempts} attempts, last failure: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("endpoint returned an unusable response: {0}")]
    Malformed(String),
    #[error("no scripted response for {0}")]
    UnscriptedRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token. `None`
    /// sends no Authorization header.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_multiplier: f64,
    pub max_parallel: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            auth_env: None,
            timeout_ms: 120_000,
            max_retries: 3,
            backoff_initial_ms: 500,
            backoff_multiplier: 2.0,
            max_parallel: 4,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::InvalidConfig("base_url is empty".into()));
        }
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidConfig("timeout_ms must be positive".into()));
        }
        if self.max_parallel == 0 {
            return Err(GatewayError::InvalidConfig(
                "max_parallel must be at least 1".into(),
            ));
        }
        if self.backoff_multiplier < 1.0 {
            return Err(GatewayError::InvalidConfig(
                "backoff_multiplier must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One logical model call, fully determined by its fields. Cache keys are
/// derived from these values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmRequest {
    pub template_id: String,
    pub prompt_text: String,
    /// Digest of the values substituted into the template, before rendering.
    pub inputs_digest: ContentDigest,
    pub image_id: String,
    pub image_digest: ContentDigest,
    pub params: GenerationParams,
}

impl VlmRequest {
    pub fn prompt_digest(&self) -> ContentDigest {
        ContentDigest::of_text(&self.prompt_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub raw_text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmExchange {
    pub request: VlmRequest,
    pub response: VlmResponse,
    pub timestamp_ms: u64,
}

impl VlmExchange {
    /// Clear wall-clock fields so repeated runs produce byte-identical
    /// records.
    pub fn scrub_timings(&mut self) {
        self.timestamp_ms = 0;
        self.response.latency_ms = 0;
    }
}

/// Result of a single attempt against the endpoint.
#[derive(Debug, Clone)]
pub enum AttemptOutcome {
    Text {
        raw_text: String,
        finish_reason: Option<String>,
    },
    HttpStatus {
        status: u16,
        body: String,
    },
    Transport {
        message: String,
    },
    Malformed {
        message: String,
    },
}

pub trait VlmBackend: Send + Sync {
    fn attempt(&self, request: &VlmRequest, body: &serde_json::Value) -> AttemptOutcome;
}

/// Counting semaphore; `acquire` blocks while all permits are out.
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Limiter {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.freed.wait(available).unwrap();
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().unwrap() += 1;
        self.limiter.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn VlmBackend>,
    config: EndpointConfig,
    limiter: Limiter,
}

impl Gateway {
    pub fn new(backend: Arc<dyn VlmBackend>, config: EndpointConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = Limiter::new(config.max_parallel);
        Ok(Gateway {
            backend,
            config,
            limiter,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn build_request(
        prompt: &RenderedPrompt,
        image: &LoadedImage,
        params: &GenerationParams,
    ) -> VlmRequest {
        VlmRequest {
            template_id: prompt.template_id().to_string(),
            prompt_text: prompt.text.clone(),
            inputs_digest: prompt.inputs_digest,
            image_id: image.image.id.clone(),
            image_digest: image.digest(),
            params: params.clone(),
        }
    }

    /// Chat-completions body: a single user message whose content is the
    /// image part followed by the text part.
    pub fn build_body(request: &VlmRequest, image_bytes: &[u8], mime: &str) -> serde_json::Value {
        let data_url = format!("data:{mime};base64,{}", BASE64.encode(image_bytes));
        let mut body = serde_json::json!({
            "model": request.params.model_id,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": data_url}},
                    {"type": "text", "text": request.prompt_text},
                ],
            }],
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        });
        if let Some(seed) = request.params.seed {
            body["seed"] = serde_json::json!(seed);
        }
        body
    }

    /// Run one call with admission control and retries. Rate limits (429),
    /// server errors (5xx), and transport failures retry with exponential
    /// backoff; other HTTP statuses and unusable bodies fail immediately.
    pub fn complete(
        &self,
        prompt: &RenderedPrompt,
        image: &LoadedImage,
        params: &GenerationParams,
    ) -> Result<VlmExchange, GatewayError> {
        let request = Self::build_request(prompt, image, params);
        let body = Self::build_body(&request, &image.bytes, image.image.media_type.mime());

        let attempts = self.config.max_retries + 1;
        let mut backoff_ms = self.config.backoff_initial_ms;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                if backoff_ms > 0 {
                    std::thread::sleep(Duration::from_millis(backoff_ms));
                }
                backoff_ms = (backoff_ms as f64 * self.config.backoff_multiplier) as u64;
            }
            let started = Instant::now();
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.attempt(&request, &body)
            };
            match outcome {
                AttemptOutcome::Text {
                    raw_text,
                    finish_reason,
                } => {
                    return Ok(VlmExchange {
                        request,
                        response: VlmResponse {
                            raw_text,
                            finish_reason,
                            latency_ms: started.elapsed().as_millis() as u64,
                        },
                        timestamp_ms: SystemTime::now()
                            .duration_since(UNIX_EPOCH)
                            .map(|d| d.as_millis() as u64)
                            .unwrap_or(0),
                    });
                }
                AttemptOutcome::HttpStatus { status, body } => {
                    if status == 429 || status >= 500 {
                        last_failure = format!("status {status}: {body}");
                    } else {
                        return Err(GatewayError::PermanentHttp { status, body });
                    }
                }
                AttemptOutcome::Transport { message } => {
                    last_failure = format!("transport: {message}");
                }
                AttemptOutcome::Malformed { message } => {
                    return Err(GatewayError::Malformed(message));
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts,
            last: last_failure,
        })
    }
}

/// Backend that POSTs to `{base_url}/chat/completions`.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    auth: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &EndpointConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let auth = match &config.auth_env {
            Some(var) => {
                let token = std::env::var(var).unwrap_or_default();
                if token.trim().is_empty() {
                    return Err(GatewayError::MissingAuth { var: var.clone() });
                }
                Some(token)
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            auth,
        })
    }
}

impl VlmBackend for HttpBackend {
    fn attempt(&self, _request: &VlmRequest, body: &serde_json::Value) -> AttemptOutcome {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.auth {
            req = req.bearer_auth(token);
        }
        let resp = match req.send() {
            Ok(resp) => resp,
            Err(e) => {
                return AttemptOutcome::Transport {
                    message: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(text) => text,
            Err(e) => {
                return AttemptOutcome::Transport {
                    message: format!("reading body: {e}"),
                }
            }
        };
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(2000);
            return AttemptOutcome::HttpStatus { status, body };
        }
        extract_message_content(&text)
    }
}

fn extract_message_content(body: &str) -> AttemptOutcome {
    let parsed: serde_json::Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => {
            return AttemptOutcome::Malformed {
                message: format!("response is not JSON: {e}"),
            }
        }
    };
    let content = parsed
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str());
    let Some(content) = content else {
        return AttemptOutcome::Malformed {
            message: "missing choices[0].message.content".into(),
        };
    };
    if content.trim().is_empty() {
        return AttemptOutcome::Malformed {
            message: "empty message content".into(),
        };
    }
    let finish_reason = parsed
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("finish_reason"))
        .and_then(|f| f.as_str())
        .map(str::to_string);
    AttemptOutcome::Text {
        raw_text: content.to_string(),
        finish_reason,
    }
}

/// Identifies a scripted response. `inputs_digest: None` is a wildcard that
/// matches any inputs for the (template, image) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MockKey {
    pub template_id: String,
    pub image_id: String,
    #[serde(default)]
    pub inputs_digest: Option<ContentDigest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockStep {
    Text {
        raw_text: String,
        #[serde(default)]
        finish_reason: Option<String>,
    },
    Status {
        status: u16,
        #[serde(default)]
        body: String,
    },
    Transport,
}

#[derive(Debug, Clone)]
pub enum MissPolicy {
    Error,
    Default(String),
}

struct ScriptState {
    steps: Vec<MockStep>,
    cursor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub key: MockKey,
    pub prompt_digest: ContentDigest,
    pub image_digest: ContentDigest,
    pub body_digest: ContentDigest,
}

/// In-process backend driven by a script. The last step of a script repeats
/// once the cursor passes the end.
pub struct MockBackend {
    scripts: Mutex<HashMap<MockKey, ScriptState>>,
    on_miss: MissPolicy,
    latency: Duration,
    attempts: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: Mutex<Vec<MockCall>>,
}

impl MockBackend {
    pub fn new(on_miss: MissPolicy) -> Self {
        MockBackend {
            scripts: Mutex::new(HashMap::new()),
            on_miss,
            latency: Duration::ZERO,
            attempts: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn script(&self, key: MockKey, steps: Vec<MockStep>) {
        assert!(!steps.is_empty(), "script needs at least one step");
        self.scripts
            .lock()
            .unwrap()
            .insert(key, ScriptState { steps, cursor: 0 });
    }

    pub fn script_text(&self, key: MockKey, text: impl Into<String>) {
        self.script(
            key,
            vec![MockStep::Text {
                raw_text: text.into(),
                finish_reason: Some("stop".into()),
            }],
        );
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn max_observed_parallelism(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap().clone()
    }

    fn next_step(&self, request: &VlmRequest) -> Option<MockStep> {
        let mut scripts = self.scripts.lock().unwrap();
        let exact = MockKey {
            template_id: request.template_id.clone(),
            image_id: request.image_id.clone(),
            inputs_digest: Some(request.inputs_digest),
        };
        let wildcard = MockKey {
            inputs_digest: None,
            ..exact.clone()
        };
        let state = scripts.get_mut(&exact).or(None);
        let state = match state {
            Some(s) => Some(s),
            None => scripts.get_mut(&wildcard),
        }?;
        let step = state.steps[state.cursor.min(state.steps.len() - 1)].clone();
        state.cursor += 1;
        Some(step)
    }
}

/// Serializable script for driving a [`MockBackend`] from a file, so runs
/// can be exercised end to end without a live endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    /// Reply used for unscripted requests. Omit it to make misses an error.
    #[serde(default)]
    pub default_response: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub scripts: Vec<MockScriptEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScriptEntry {
    pub template_id: String,
    pub image_id: String,
    #[serde(default)]
    pub inputs_digest: Option<ContentDigest>,
    pub steps: Vec<MockStep>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(text)
            .map_err(|e| GatewayError::InvalidConfig(format!("mock script: {e}")))
    }

    pub fn into_backend(self) -> MockBackend {
        let on_miss = match self.default_response {
            Some(text) => MissPolicy::Default(text),
            None => MissPolicy::Error,
        };
        let backend =
            MockBackend::new(on_miss).with_latency(Duration::from_millis(self.latency_ms));
        for entry in self.scripts {
            backend.script(
                MockKey {
                    template_id: entry.template_id,
                    image_id: entry.image_id,
                    inputs_digest: entry.inputs_digest,
                },
                entry.steps,
            );
        }
        backend
    }
}

impl VlmBackend for MockBackend {
    fn attempt(&self, request: &VlmRequest, body: &serde_json::Value) -> AttemptOutcome {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }

        self.calls.lock().unwrap().push(MockCall {
            key: MockKey {
                template_id: request.template_id.clone(),
                image_id: request.image_id.clone(),
                inputs_digest: Some(request.inputs_digest),
            },
            prompt_digest: request.prompt_digest(),
            image_digest: request.image_digest,
            body_digest: ContentDigest::of_text(&body.to_string()),
        });

        let outcome = match self.next_step(request) {
            Some(MockStep::Text {
                raw_text,
                finish_reason,
            }) => AttemptOutcome::Text {
                raw_text,
                finish_reason,
            },
            Some(MockStep::Status { status, body }) => AttemptOutcome::HttpStatus { status, body },
            Some(MockStep::Transport) => AttemptOutcome::Transport {
                message: "scripted transport failure".into(),
            },
            None => match &self.on_miss {
                MissPolicy::Error => AttemptOutcome::Malformed {
                    message: format!(
                        "no scripted response for template {} image {} inputs {}",
                        request.template_id, request.image_id, request.inputs_digest
                    ),
                },
                MissPolicy::Default(text) => AttemptOutcome::Text {
                    raw_text: text.clone(),
                    finish_reason: Some("stop".into()),
                },
            },
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        outcome
    }
}

//! HTTP backend: chat-completion wire format, retry with exponential
//! backoff, token-bucket pacing, and response caching. The transport and
//! clock are injected so every property here is testable offline.

use std::collections::VecDeque;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::Deserialize;

use super::cache::ResponseCache;
use super::{
    cache_key, BackendSpec, ChatRequest, ClientError, Clock, ImageSource, MessagePart,
    ModelResponse, TokenUsage,
};

/// One outgoing HTTP call, fully assembled.
#[derive(Clone, Debug)]
pub struct WireRequest {
    pub url: String,
    pub auth_bearer: Option<String>,
    pub body: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct WireResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Io(String),
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportError::Timeout => f.write_str("request timed out"),
            TransportError::Io(detail) => write!(f, "io: {detail}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &WireRequest) -> Result<WireResponse, TransportError>;
}

/// Real HTTP transport.
pub struct UreqTransport {
    timeout: Duration,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> UreqTransport {
        UreqTransport { timeout }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn send(&self, request: &WireRequest) -> Result<WireResponse, TransportError> {
        let mut req = ureq::post(&request.url)
            .timeout(self.timeout)
            .set("content-type", "application/json");
        if let Some(token) = &request.auth_bearer {
            req = req.set("authorization", &format!("Bearer {token}"));
        }
        match req.send_string(&request.body.to_string()) {
            Ok(response) => {
                let status = response.status();
                let body = response
                    .into_string()
                    .map_err(|e| TransportError::Io(e.to_string()))?;
                Ok(WireResponse { status, body })
            }
            Err(ureq::Error::Status(status, response)) => {
                let body = response.into_string().unwrap_or_default();
                Ok(WireResponse { status, body })
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Io(t.to_string())),
        }
    }
}

/// A call the scripted transport saw, stamped with the injected clock.
#[derive(Clone, Debug)]
pub struct LoggedCall {
    pub at_ms: u64,
    pub request: WireRequest,
}

/// Offline transport: replays a programmed status/body sequence, then falls
/// back to a deterministic echo completion. Every call is logged with its
/// timestamp.
pub struct ScriptedTransport {
    clock: Arc<dyn Clock>,
    script: Mutex<VecDeque<Result<WireResponse, ()>>>,
    log: Mutex<Vec<LoggedCall>>,
}

impl ScriptedTransport {
    pub fn new(clock: Arc<dyn Clock>) -> ScriptedTransport {
        ScriptedTransport {
            clock,
            script: Mutex::new(VecDeque::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Queue a bare status with an empty body (e.g. 429, 503).
    pub fn push_status(&self, status: u16) {
        self.script
            .lock()
            .unwrap()
            .push_back(Ok(WireResponse { status, body: String::new() }));
    }

    /// Queue a 200 completion whose content is `text`.
    pub fn push_completion(&self, text: &str) {
        self.script.lock().unwrap().push_back(Ok(WireResponse {
            status: 200,
            body: completion_body(text),
        }));
    }

    /// Queue a transport-level failure (timeout).
    pub fn push_timeout(&self) {
        self.script.lock().unwrap().push_back(Err(()));
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

fn completion_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": 1, "completion_tokens": 1},
    })
    .to_string()
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &WireRequest) -> Result<WireResponse, TransportError> {
        self.log.lock().unwrap().push(LoggedCall {
            at_ms: self.clock.now_ms(),
            request: request.clone(),
        });
        match self.script.lock().unwrap().pop_front() {
            Some(Ok(response)) => Ok(response),
            Some(Err(())) => Err(TransportError::Timeout),
            None => {
                // Deterministic default: echo a digest of the body.
                let digest = super::sha256_hex(request.body.to_string().as_bytes());
                Ok(WireResponse {
                    status: 200,
                    body: completion_body(&format!("echo:{}", &digest[..16])),
                })
            }
        }
    }
}

/// Sliding-window pacer: at most `per_minute` admissions in any 60 s window.
struct RateLimiter {
    per_minute: u32,
    history: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> RateLimiter {
        RateLimiter { per_minute, history: Mutex::new(VecDeque::new()) }
    }

    fn acquire(&self, clock: &dyn Clock) {
        loop {
            let now = clock.now_ms();
            let mut history = self.history.lock().unwrap();
            while history.front().map(|&t| t + 60_000 <= now).unwrap_or(false) {
                history.pop_front();
            }
            if (history.len() as u32) < self.per_minute {
                history.push_back(now);
                return;
            }
            let wait = history.front().unwrap() + 60_000 - now;
            drop(history);
            clock.sleep_ms(wait.max(1));
        }
    }
}

#[derive(Deserialize)]
struct WireCompletion {
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
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn media_type_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "application/octet-stream"
    }
}

fn retryable_status(status: u16) -> bool {
    status == 429 || (500..=599).contains(&status)
}

/// A remote chat-completion backend.
pub struct HttpBackend {
    spec: BackendSpec,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    cache: Option<ResponseCache>,
    limiter: RateLimiter,
}

impl HttpBackend {
    pub fn new(
        spec: BackendSpec,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
        cache_dir: Option<PathBuf>,
    ) -> Result<HttpBackend, ClientError> {
        spec.validate()?;
        let cache = match cache_dir {
            Some(dir) => Some(ResponseCache::new(dir)?),
            None => None,
        };
        let limiter = RateLimiter::new(spec.rate_limit_per_minute);
        Ok(HttpBackend { spec, transport, clock, cache, limiter })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn image_part_json(&self, image: &ImageSource) -> Result<serde_json::Value, ClientError> {
        let url = match image {
            ImageSource::Reference { reference } => {
                if reference.is_remote() {
                    reference.as_str().to_string()
                } else {
                    let bytes = std::fs::read(reference.as_str()).map_err(|_| {
                        ClientError::UnresolvableImage { reference: reference.0.clone() }
                    })?;
                    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                    format!("data:{};base64,{encoded}", media_type_for(reference.as_str()))
                }
            }
            ImageSource::Inline { media_type, data_base64 } => {
                format!("data:{media_type};base64,{data_base64}")
            }
        };
        Ok(serde_json::json!({ "type": "image_url", "image_url": { "url": url } }))
    }

    /// The chat-completion body: message list plus the generation fields this
    /// backend advertises. Unadvertised fields never reach the wire.
    fn build_body(&self, request: &ChatRequest) -> Result<serde_json::Value, ClientError> {
        let mut messages = Vec::with_capacity(request.messages.len());
        for message in &request.messages {
            let mut content = Vec::with_capacity(message.parts.len());
            for part in &message.parts {
                match part {
                    MessagePart::Text { text } => {
                        content.push(serde_json::json!({ "type": "text", "text": text }));
                    }
                    MessagePart::Image { image } => content.push(self.image_part_json(image)?),
                }
            }
            messages.push(serde_json::json!({ "role": message.role.as_str(), "content": content }));
        }
        let mut body = serde_json::Map::new();
        body.insert("model".to_string(), serde_json::json!(self.spec.model_name));
        body.insert("messages".to_string(), serde_json::Value::Array(messages));
        for name in &self.spec.supported_generation_fields {
            if let Some(value) = request.generation.field(name) {
                body.insert(name.clone(), value);
            }
        }
        Ok(serde_json::Value::Object(body))
    }

    fn parse_completion(&self, body: &str) -> Result<(String, Option<TokenUsage>), ClientError> {
        let parsed: WireCompletion = serde_json::from_str(body)
            .map_err(|e| ClientError::BadResponse(format!("{e}; body: {}", truncate(body))))?;
        let choice = parsed
            .choices
            .first()
            .ok_or_else(|| ClientError::BadResponse("no choices in completion".to_string()))?;
        let usage = parsed.usage.map(|u| TokenUsage {
            prompt: u.prompt_tokens,
            completion: u.completion_tokens,
        });
        Ok((choice.message.content.clone().unwrap_or_default(), usage))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ModelResponse, ClientError> {
        request.generation.validate()?;
        if request.has_image() && !self.spec.supports_images {
            return Err(ClientError::ImageNotSupported { backend: self.spec.id.clone() });
        }

        let key = cache_key(&self.spec.model_name, request)?;
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
        }

        let auth_bearer = match &self.spec.auth_env {
            Some(variable) => Some(std::env::var(variable).map_err(|_| {
                ClientError::MissingAuth {
                    variable: variable.clone(),
                    backend: self.spec.id.clone(),
                }
            })?),
            None => None,
        };

        let wire = WireRequest {
            url: self.spec.endpoint.clone(),
            auth_bearer,
            body: self.build_body(request)?,
        };

        let max_attempts = self.spec.retry.max_attempts;
        let mut last_failure = String::new();
        for attempt in 1..=max_attempts {
            self.limiter.acquire(self.clock.as_ref());
            let started = self.clock.now_ms();
            match self.transport.send(&wire) {
                Ok(response) if response.status == 200 => {
                    let (text, token_usage) = self.parse_completion(&response.body)?;
                    let model_response = ModelResponse {
                        text,
                        latency_ms: self.clock.now_ms().saturating_sub(started),
                        token_usage,
                        backend_id: self.spec.id.clone(),
                        from_cache: false,
                    };
                    if let Some(cache) = &self.cache {
                        cache.put(&key, &self.spec.id, &self.spec.model_name, &model_response)?;
                    }
                    return Ok(model_response);
                }
                Ok(response) if retryable_status(response.status) => {
                    last_failure = format!("http status {}", response.status);
                }
                Ok(response) => {
                    return Err(ClientError::Http {
                        status: response.status,
                        detail: truncate(&response.body),
                    });
                }
                Err(transport_error) => {
                    last_failure = transport_error.to_string();
                }
            }
            if attempt < max_attempts {
                let backoff = self.spec.retry.base_backoff_ms << (attempt - 1);
                self.clock.sleep_ms(backoff);
            }
        }
        Err(ClientError::RetriesExhausted { attempts: max_attempts, last: last_failure })
    }
}

fn truncate(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let cut = body
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}…", &body[..cut])
    }
}

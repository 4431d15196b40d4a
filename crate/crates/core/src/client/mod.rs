//! Uniform access to chat-completion model backends.
//!
//! Two backend flavors sit behind one `complete` surface: [`HttpBackend`]
//! speaks the de-facto chat-completion JSON shape with on-disk response
//! caching, exponential-backoff retry, and per-backend rate limiting;
//! [`ScriptedBackend`] is a deterministic rule-based stand-in for offline
//! runs and tests. Clock and transport are injectable so retry and
//! rate-limit behavior is assertable without wall time or a network.

mod cache;
mod http;
mod scripted;

pub use cache::ResponseCache;
pub use http::{
    HttpBackend, LoggedCall, ScriptedTransport, Transport, TransportError, UreqTransport,
    WireRequest, WireResponse,
};
pub use scripted::{ScriptedBackend, ScriptedRule, TranscriptEntry};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ImageRef;

/// Generation parameter names a backend may advertise.
pub const GENERATION_FIELD_NAMES: [&str; 6] = [
    "temperature",
    "top_p",
    "top_k",
    "repetition_penalty",
    "num_beams",
    "max_tokens",
];

/// Sampling configuration sent with each request. Fields a backend does not
/// advertise are dropped from the wire, never from the config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    pub num_beams: u32,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.3,
            top_p: 0.7,
            top_k: 1,
            repetition_penalty: 1.0,
            num_beams: 1,
            max_tokens: 2048,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.temperature < 0.0 || self.temperature.is_nan() {
            return Err(ClientError::InvalidGeneration(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ClientError::InvalidGeneration(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        if self.top_k < 1 {
            return Err(ClientError::InvalidGeneration("top_k must be >= 1".into()));
        }
        if self.num_beams < 1 {
            return Err(ClientError::InvalidGeneration("num_beams must be >= 1".into()));
        }
        Ok(())
    }

    /// The wire value for one advertised field name.
    pub fn field(&self, name: &str) -> Option<serde_json::Value> {
        match name {
            "temperature" => Some(serde_json::json!(self.temperature)),
            "top_p" => Some(serde_json::json!(self.top_p)),
            "top_k" => Some(serde_json::json!(self.top_k)),
            "repetition_penalty" => Some(serde_json::json!(self.repetition_penalty)),
            "num_beams" => Some(serde_json::json!(self.num_beams)),
            "max_tokens" => Some(serde_json::json!(self.max_tokens)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// Where an image part's bytes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ImageSource {
    /// A path or http(s) URI.
    Reference { reference: ImageRef },
    /// Inline bytes with a media-type tag.
    Inline { media_type: String, data_base64: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePart {
    Text { text: String },
    Image { image: ImageSource },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

/// One request to a model backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_id: String,
    pub messages: Vec<ChatMessage>,
    pub generation: GenerationConfig,
}

impl ChatRequest {
    /// A single user message of one text part.
    pub fn user_text(backend_id: &str, text: &str, generation: GenerationConfig) -> ChatRequest {
        ChatRequest {
            backend_id: backend_id.to_string(),
            messages: vec![ChatMessage {
                role: Role::User,
                parts: vec![MessagePart::Text { text: text.to_string() }],
            }],
            generation,
        }
    }

    /// A single user message of an image part followed by a text part.
    pub fn user_text_with_image(
        backend_id: &str,
        text: &str,
        image: &ImageRef,
        generation: GenerationConfig,
    ) -> ChatRequest {
        ChatRequest {
            backend_id: backend_id.to_string(),
            messages: vec![ChatMessage {
                role: Role::User,
                parts: vec![
                    MessagePart::Image {
                        image: ImageSource::Reference { reference: image.clone() },
                    },
                    MessagePart::Text { text: text.to_string() },
                ],
            }],
            generation,
        }
    }

    pub fn has_image(&self) -> bool {
        self.messages
            .iter()
            .any(|m| m.parts.iter().any(|p| matches!(p, MessagePart::Image { .. })))
    }

    /// All text parts joined with newlines, in message order.
    pub fn text_content(&self) -> String {
        let mut out = Vec::new();
        for message in &self.messages {
            for part in &message.parts {
                if let MessagePart::Text { text } = part {
                    out.push(text.as_str());
                }
            }
        }
        out.join("\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

/// One completed round-trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
    pub backend_id: String,
    pub from_cache: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_backoff_ms: 500 }
    }
}

fn default_generation_fields() -> BTreeSet<String> {
    GENERATION_FIELD_NAMES.iter().map(|s| s.to_string()).collect()
}

fn default_rate_limit() -> u32 {
    60
}

/// Declaration of one backend in the registry file. Auth tokens come from
/// the named environment variable only; keys never live in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub id: String,
    pub endpoint: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub supports_images: bool,
    #[serde(default = "default_generation_fields")]
    pub supported_generation_fields: BTreeSet<String>,
    #[serde(default = "default_rate_limit")]
    pub rate_limit_per_minute: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.id.is_empty() {
            return Err(ClientError::InvalidSpec("backend id is empty".into()));
        }
        let well_formed = self.endpoint.starts_with("http://")
            || self.endpoint.starts_with("https://")
            || self.endpoint.starts_with("scripted:");
        if !well_formed {
            return Err(ClientError::InvalidSpec(format!(
                "backend {}: endpoint \"{}\" is not http(s) or scripted",
                self.id, self.endpoint
            )));
        }
        if self.retry.max_attempts < 1 {
            return Err(ClientError::InvalidSpec(format!(
                "backend {}: retry.max_attempts must be >= 1",
                self.id
            )));
        }
        if self.rate_limit_per_minute < 1 {
            return Err(ClientError::InvalidSpec(format!(
                "backend {}: rate_limit_per_minute must be >= 1",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ClientError {
    MissingAuth { variable: String, backend: String },
    ImageNotSupported { backend: String },
    UnresolvableImage { reference: String },
    Http { status: u16, detail: String },
    Transport(String),
    RetriesExhausted { attempts: u32, last: String },
    BadResponse(String),
    Cache(String),
    InvalidSpec(String),
    InvalidGeneration(String),
    UnknownBackend(String),
    NoRules(String),
}

impl fmt::Display for ClientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientError::MissingAuth { variable, backend } => {
                write!(f, "backend {backend}: auth environment variable {variable} is not set")
            }
            ClientError::ImageNotSupported { backend } => {
                write!(f, "backend {backend} does not accept image parts")
            }
            ClientError::UnresolvableImage { reference } => {
                write!(f, "image reference \"{reference}\" cannot be resolved")
            }
            ClientError::Http { status, detail } => write!(f, "http status {status}: {detail}"),
            ClientError::Transport(detail) => write!(f, "transport failure: {detail}"),
            ClientError::RetriesExhausted { attempts, last } => {
                write!(f, "gave up after {attempts} attempts; last failure: {last}")
            }
            ClientError::BadResponse(detail) => write!(f, "malformed response: {detail}"),
            ClientError::Cache(detail) => write!(f, "cache failure: {detail}"),
            ClientError::InvalidSpec(detail) => write!(f, "invalid backend spec: {detail}"),
            ClientError::InvalidGeneration(detail) => {
                write!(f, "invalid generation config: {detail}")
            }
            ClientError::UnknownBackend(id) => write!(f, "backend \"{id}\" not in registry"),
            ClientError::NoRules(detail) => write!(f, "scripted backend: {detail}"),
        }
    }
}

impl std::error::Error for ClientError {}

/// Time source; injectable so pacing and backoff are testable.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep_ms(&self, ms: u64);
}

/// Monotonic wall clock.
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> SystemClock {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock::new()
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }
}

/// Test clock: sleeping advances time instead of waiting, and every sleep is
/// recorded.
pub struct ManualClock {
    now: Mutex<u64>,
    sleeps: Mutex<Vec<u64>>,
}

impl ManualClock {
    pub fn new() -> ManualClock {
        ManualClock { now: Mutex::new(0), sleeps: Mutex::new(Vec::new()) }
    }

    pub fn advance(&self, ms: u64) {
        *self.now.lock().unwrap() += ms;
    }

    pub fn sleeps(&self) -> Vec<u64> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        ManualClock::new()
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        *self.now.lock().unwrap()
    }

    fn sleep_ms(&self, ms: u64) {
        self.sleeps.lock().unwrap().push(ms);
        *self.now.lock().unwrap() += ms;
    }
}

/// Hex-encoded SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_image(image: &ImageSource) -> Result<String, ClientError> {
    match image {
        ImageSource::Reference { reference } => {
            if reference.is_remote() {
                Ok(sha256_hex(format!("url:{}", reference.as_str()).as_bytes()))
            } else {
                let bytes = std::fs::read(reference.as_str()).map_err(|_| {
                    ClientError::UnresolvableImage { reference: reference.0.clone() }
                })?;
                Ok(sha256_hex(&bytes))
            }
        }
        ImageSource::Inline { data_base64, .. } => {
            use base64::Engine as _;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(data_base64)
                .map_err(|_| ClientError::UnresolvableImage {
                    reference: "<inline bytes>".to_string(),
                })?;
            Ok(sha256_hex(&bytes))
        }
    }
}

/// Stable content digest of a request: backend id, model name, canonicalized
/// messages (image parts digested by their bytes), and all generation
/// fields. Insensitive to serialization field order.
pub fn cache_key(model_name: &str, request: &ChatRequest) -> Result<String, ClientError> {
    let mut messages = Vec::with_capacity(request.messages.len());
    for message in &request.messages {
        let mut parts = Vec::with_capacity(message.parts.len());
        for part in &message.parts {
            let value = match part {
                MessagePart::Text { text } => serde_json::json!({ "text": text }),
                MessagePart::Image { image } => {
                    serde_json::json!({ "image_sha256": digest_image(image)? })
                }
            };
            parts.push(value);
        }
        messages.push(serde_json::json!({ "role": message.role.as_str(), "parts": parts }));
    }
    let generation = &request.generation;
    // serde_json's map is ordered by key, so this serializes canonically.
    let canonical = serde_json::json!({
        "backend_id": request.backend_id,
        "generation": {
            "max_tokens": generation.max_tokens,
            "num_beams": generation.num_beams,
            "repetition_penalty": generation.repetition_penalty,
            "temperature": generation.temperature,
            "top_k": generation.top_k,
            "top_p": generation.top_p,
        },
        "messages": messages,
        "model_name": model_name,
    });
    Ok(sha256_hex(canonical.to_string().as_bytes()))
}

/// A loaded backend, ready to complete requests.
pub enum Backend {
    Http(HttpBackend),
    Scripted(ScriptedBackend),
}

impl Backend {
    pub fn id(&self) -> &str {
        match self {
            Backend::Http(b) => b.id(),
            Backend::Scripted(b) => b.id(),
        }
    }

    pub fn supports_images(&self) -> bool {
        match self {
            Backend::Http(b) => b.spec().supports_images,
            Backend::Scripted(b) => b.supports_images(),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ModelResponse, ClientError> {
        match self {
            Backend::Http(b) => b.complete(request),
            Backend::Scripted(b) => b.complete(request),
        }
    }

    pub fn as_scripted(&self) -> Option<&ScriptedBackend> {
        match self {
            Backend::Scripted(b) => Some(b),
            _ => None,
        }
    }
}

/// Shared infrastructure handed to every HTTP backend built from a registry.
pub struct RegistryContext {
    pub cache_dir: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub transport: Arc<dyn Transport>,
}

impl Default for RegistryContext {
    fn default() -> Self {
        RegistryContext {
            cache_dir: None,
            clock: Arc::new(SystemClock::new()),
            transport: Arc::new(UreqTransport::default()),
        }
    }
}

#[derive(Deserialize)]
struct RegistryFile {
    backends: Vec<BackendSpec>,
}

/// All configured backends, by id.
#[derive(Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<Backend>>,
}

impl BackendRegistry {
    pub fn new() -> BackendRegistry {
        BackendRegistry::default()
    }

    pub fn insert(&mut self, backend: Backend) {
        self.backends.insert(backend.id().to_string(), Arc::new(backend));
    }

    pub fn get(&self, id: &str) -> Result<&Arc<Backend>, ClientError> {
        self.backends.get(id).ok_or_else(|| ClientError::UnknownBackend(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(|s| s.as_str())
    }

    /// The scripted backends, for transcript inspection after a run.
    pub fn scripted(&self) -> impl Iterator<Item = (&str, &ScriptedBackend)> {
        self.backends
            .iter()
            .filter_map(|(id, b)| b.as_scripted().map(|s| (id.as_str(), s)))
    }
}

/// Load a registry file. Scripted endpoints (`scripted:<path>`) are resolved
/// relative to the registry file's directory.
pub fn load_registry(path: &Path, ctx: &RegistryContext) -> Result<BackendRegistry, ClientError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ClientError::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
    let file: RegistryFile = serde_json::from_str(&raw)
        .map_err(|e| ClientError::InvalidSpec(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut registry = BackendRegistry::new();
    for spec in file.backends {
        spec.validate()?;
        let backend = if let Some(rules_ref) = spec.endpoint.strip_prefix("scripted:") {
            let rules_path = base_dir.join(rules_ref);
            Backend::Scripted(ScriptedBackend::from_rules_file(&spec.id, &rules_path)?)
        } else {
            Backend::Http(HttpBackend::new(
                spec,
                Arc::clone(&ctx.transport),
                Arc::clone(&ctx.clock),
                ctx.cache_dir.clone(),
            )?)
        };
        registry.insert(backend);
    }
    Ok(registry)
}

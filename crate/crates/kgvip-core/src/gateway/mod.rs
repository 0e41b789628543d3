//! Single choke-point for all model inference.
//!
//! Every chat, vision-chat, embedding, and judge interaction flows through
//! [`ModelGateway::call`], which handles the cassette mode (live / record /
//! replay), the bounded in-flight limit, and — via [`ModelGateway::call_with_retries`]
//! — the per-operation retry budget with the validator's error appended to
//! the retry prompt.

mod cassette;
mod schema;
mod template;
mod transport;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{CassetteMode, CassetteRecord, ReplayStore};
pub use schema::{
    extract_json_slice, parse_structured, KeepLists, KeepRelation, ParsedValue, QaPair,
    QaPairsBody, SchemaId,
};
pub use template::{templates, TemplateStore};
pub use transport::{EndpointConfig, HttpTransport, Transport};

use cassette::CassetteWriter;

/// Default retry budget: a logical operation makes at most R+1 calls.
pub const DEFAULT_RETRY_BUDGET: usize = 2;
pub const DEFAULT_IN_FLIGHT_LIMIT: usize = 4;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown prompt template {id:?}")]
    UnknownTemplate { id: String },
    #[error("template {template:?} has no binding for slot {slot:?}")]
    MissingSlot { template: String, slot: String },
    #[error("binding {binding:?} does not match any slot of template {template:?}")]
    UnknownBinding { template: String, binding: String },
    #[error("no endpoint configured for role {role:?}")]
    EndpointNotConfigured { role: EndpointRole },
    #[error("transport error: {message}")]
    Transport { message: String },
    #[error("endpoint returned HTTP status {status}")]
    HttpStatus { status: u16 },
    #[error("replay cassette has no recording for digest {digest}")]
    DigestMiss { digest: String },
    #[error("cassette i/o error on {path}: {message}")]
    CassetteIo { path: String, message: String },
    #[error("malformed JSON in model output: {message}")]
    MalformedJson { message: String },
    #[error("schema violation on field {field:?}: {message}")]
    SchemaViolation { field: String, message: String },
    #[error("unparseable model output after {attempts} attempts: {last_error}")]
    UnparseableOutput { attempts: usize, last_error: String },
    #[error("no transport configured for {mode:?} mode")]
    NoTransport { mode: CassetteMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointRole {
    Chat,
    VisionChat,
    TextEmbed,
    ImageEmbed,
    Judge,
}

impl EndpointRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            EndpointRole::Chat => "chat",
            EndpointRole::VisionChat => "vision_chat",
            EndpointRole::TextEmbed => "text_embed",
            EndpointRole::ImageEmbed => "image_embed",
            EndpointRole::Judge => "judge",
        }
    }
}

#[derive(Debug, Clone)]
pub enum MediaPayload {
    Bytes(Vec<u8>),
    Uri(String),
}

/// An attached media part. The name is a stable identifier (path, URI, or
/// crop descriptor) that participates in the request digest.
#[derive(Debug, Clone)]
pub struct MediaPart {
    pub name: String,
    pub payload: MediaPayload,
}

impl MediaPart {
    pub fn bytes(name: String, bytes: Vec<u8>) -> Self {
        MediaPart {
            name,
            payload: MediaPayload::Bytes(bytes),
        }
    }

    pub fn uri(uri: impl Into<String>) -> Self {
        let uri = uri.into();
        MediaPart {
            name: uri.clone(),
            payload: MediaPayload::Uri(uri),
        }
    }
}

/// A fully rendered model request.
#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub role: EndpointRole,
    pub template_id: Option<String>,
    pub prompt: String,
    pub media: Vec<MediaPart>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    pub fn payload(role: EndpointRole, prompt: String) -> Self {
        ModelRequest {
            role,
            template_id: None,
            prompt,
            media: Vec::new(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_media(mut self, part: MediaPart) -> Self {
        self.media.push(part);
        self
    }

    /// Stable content digest used for cassette lookup. Covers the logical
    /// request only — never timestamps or credentials.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.role.as_str().as_bytes());
        hasher.update(b"\0");
        hasher.update(self.template_id.as_deref().unwrap_or("").as_bytes());
        hasher.update(b"\0");
        hasher.update(self.prompt.as_bytes());
        hasher.update(b"\0");
        for part in &self.media {
            hasher.update(part.name.as_bytes());
            hasher.update(b"\0");
            match &part.payload {
                MediaPayload::Bytes(bytes) => {
                    let content: [u8; 32] = Sha256::digest(bytes).into();
                    hasher.update(content);
                }
                MediaPayload::Uri(uri) => hasher.update(uri.as_bytes()),
            }
            hasher.update(b"\0");
        }
        hasher.update(self.temperature.to_bits().to_be_bytes());
        hasher.update(self.max_tokens.to_be_bytes());
        hex::encode(hasher.finalize())
    }
}

/// Counting semaphore bounding in-flight transport requests.
struct InFlightLimit {
    permits: Mutex<usize>,
    available: Condvar,
}

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        InFlightLimit {
            permits: Mutex::new(limit.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut permits = self.permits.lock().expect("limit lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limit wait");
        }
        *permits -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limit.permits.lock().expect("limit lock");
        *permits += 1;
        self.limit.available.notify_one();
    }
}

pub struct ModelGateway {
    mode: CassetteMode,
    transport: Option<Box<dyn Transport>>,
    recorder: Option<Mutex<CassetteWriter>>,
    replay: Option<ReplayStore>,
    templates: TemplateStore,
    limit: InFlightLimit,
    retry_budget: usize,
    temperature: f64,
    max_tokens: u32,
    calls: AtomicUsize,
    transport_calls: AtomicUsize,
}

impl ModelGateway {
    fn base(mode: CassetteMode) -> Self {
        ModelGateway {
            mode,
            transport: None,
            recorder: None,
            replay: None,
            templates: TemplateStore::default(),
            limit: InFlightLimit::new(DEFAULT_IN_FLIGHT_LIMIT),
            retry_budget: DEFAULT_RETRY_BUDGET,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
            calls: AtomicUsize::new(0),
            transport_calls: AtomicUsize::new(0),
        }
    }

    pub fn live(transport: Box<dyn Transport>) -> Self {
        let mut gateway = Self::base(CassetteMode::Live);
        gateway.transport = Some(transport);
        gateway
    }

    /// Records every live response to the cassette at `path` (appending).
    pub fn record(transport: Box<dyn Transport>, path: &Path) -> Result<Self, GatewayError> {
        let mut gateway = Self::base(CassetteMode::Record);
        gateway.transport = Some(transport);
        gateway.recorder = Some(Mutex::new(CassetteWriter::create(path)?));
        Ok(gateway)
    }

    /// Replays from the cassette at `path`. No transport is held, so replay
    /// mode cannot open a network connection by construction.
    pub fn replay(path: &Path) -> Result<Self, GatewayError> {
        let mut gateway = Self::base(CassetteMode::Replay);
        gateway.replay = Some(ReplayStore::load(path)?);
        Ok(gateway)
    }

    /// Attaches a transport anyway (used by tests to prove replay never
    /// touches it).
    pub fn with_transport(mut self, transport: Box<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn with_retry_budget(mut self, budget: usize) -> Self {
        self.retry_budget = budget;
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.limit = InFlightLimit::new(limit);
        self
    }

    pub fn with_decoding(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn templates_mut(&mut self) -> &mut TemplateStore {
        &mut self.templates
    }

    /// Logical gateway calls so far (cache hits in callers don't count).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Wire calls so far (zero in replay mode, always).
    pub fn transport_call_count(&self) -> usize {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn request(&self, role: EndpointRole, prompt: String) -> ModelRequest {
        ModelRequest {
            role,
            template_id: None,
            prompt,
            media: Vec::new(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn render(
        &self,
        template_id: &str,
        bindings: &[(&str, &str)],
    ) -> Result<String, GatewayError> {
        let map: BTreeMap<&str, String> = bindings
            .iter()
            .map(|(k, v)| (*k, (*v).to_string()))
            .collect();
        self.templates.render(template_id, &map)
    }

    /// One gateway call: replay looks the digest up, live/record hit the wire.
    pub fn call(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let _guard = self.limit.acquire();
        match self.mode {
            CassetteMode::Replay => {
                let store = self.replay.as_ref().expect("replay store present");
                store.lookup(&request.digest()).map(str::to_string)
            }
            CassetteMode::Live => {
                let transport = self
                    .transport
                    .as_ref()
                    .ok_or(GatewayError::NoTransport { mode: self.mode })?;
                self.transport_calls.fetch_add(1, Ordering::SeqCst);
                transport.send(request)
            }
            CassetteMode::Record => {
                let transport = self
                    .transport
                    .as_ref()
                    .ok_or(GatewayError::NoTransport { mode: self.mode })?;
                self.transport_calls.fetch_add(1, Ordering::SeqCst);
                let started = Instant::now();
                let response = transport.send(request)?;
                let latency = started.elapsed().as_millis() as u64;
                let recorder = self.recorder.as_ref().expect("recorder present");
                recorder.lock().expect("recorder lock").append(
                    &request.digest(),
                    request.role.as_str(),
                    request.template_id.as_deref(),
                    &response,
                    latency,
                )?;
                Ok(response)
            }
        }
    }

    /// Renders a template, calls the model, and validates the body; on
    /// validation failure it retries with the error appended, up to the
    /// retry budget. Total calls per invocation ≤ budget + 1. Transport and
    /// replay errors are not retried — only invalid bodies are.
    pub fn call_with_retries<T>(
        &self,
        role: EndpointRole,
        template_id: &str,
        bindings: &[(&str, &str)],
        media: &[MediaPart],
        validate: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, GatewayError> {
        let base_prompt = self.render(template_id, bindings)?;
        let mut last_error = String::new();
        for attempt in 0..=self.retry_budget {
            let prompt = if attempt == 0 {
                base_prompt.clone()
            } else {
                format!(
                    "{base_prompt}\n\nAttempt {attempt}: your previous response was invalid: \
                     {last_error}\nReturn ONLY valid JSON matching the schema."
                )
            };
            let request = ModelRequest {
                role,
                template_id: Some(template_id.to_string()),
                prompt,
                media: media.to_vec(),
                temperature: self.temperature,
                max_tokens: self.max_tokens,
            };
            let body = self.call(&request)?;
            match validate(&body) {
                Ok(value) => return Ok(value),
                Err(message) => last_error = message,
            }
        }
        Err(GatewayError::UnparseableOutput {
            attempts: self.retry_budget + 1,
            last_error,
        })
    }

    /// `call_with_retries` against a registered schema.
    pub fn call_structured(
        &self,
        role: EndpointRole,
        template_id: &str,
        bindings: &[(&str, &str)],
        media: &[MediaPart],
        schema: SchemaId,
    ) -> Result<ParsedValue, GatewayError> {
        self.call_with_retries(role, template_id, bindings, media, |body| {
            parse_structured(body, schema).map_err(|e| e.to_string())
        })
    }
}

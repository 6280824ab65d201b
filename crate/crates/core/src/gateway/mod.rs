//! One interface over the generative backends the pipeline needs:
//! structured chat completion (optionally with image attachments),
//! text-to-image generation, and image embedding.
//!
//! Every request names the pipeline step that issued it (its *tag*). The
//! scripted backend serves fixtures keyed by `(tag, n)`, which lets the whole
//! pipeline run offline and deterministically. Structured output is enforced
//! here, not trusted to the backend: a reply that fails its schema is sent
//! back with the validation error appended, up to `max_retries` times.

mod assets;
mod backend;
mod live;
mod schema;
mod synthetic;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use assets::{content_digest, decode_png, encode_png, AssetRef, AssetStore};
pub use backend::{Backend, FallbackBackend, ScriptedBackend};
pub use live::{LiveBackend, LiveConfig};
pub use schema::{ResponseSchema, SchemaRegistry};
pub use synthetic::{placeholder_image, SyntheticEmbedder, SYNTHETIC_DIMENSION};

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("generation failed for `{tag}` after {attempts} attempt(s): {message}")]
    Generation {
        tag: String,
        message: String,
        /// Last raw model output, when there was one.
        raw_text: Option<String>,
        attempts: u32,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend `{backend}` cannot serve `{tag}`")]
    Unsupported { backend: String, tag: String },
    #[error("asset store: {0}")]
    Asset(String),
}

impl GatewayError {
    pub fn generation(tag: &str, message: impl Into<String>) -> Self {
        GatewayError::Generation {
            tag: tag.to_string(),
            message: message.into(),
            raw_text: None,
            attempts: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub enum UserPart {
    Text(String),
    Image(Arc<RgbImage>),
}

#[derive(Debug, Clone)]
pub struct ModelRequest {
    /// Pipeline step, e.g. `persona.dimensions`.
    pub tag: String,
    pub system_text: String,
    pub user_parts: Vec<UserPart>,
    /// Registered name of the expected reply structure.
    pub schema_id: String,
    /// 0..=2
    pub temperature_hint: f64,
}

impl ModelRequest {
    pub fn new(tag: impl Into<String>, schema_id: impl Into<String>) -> Self {
        ModelRequest {
            tag: tag.into(),
            system_text: String::new(),
            user_parts: Vec::new(),
            schema_id: schema_id.into(),
            temperature_hint: 0.7,
        }
    }

    pub fn system(mut self, text: impl Into<String>) -> Self {
        self.system_text = text.into();
        self
    }

    pub fn text(mut self, text: impl Into<String>) -> Self {
        self.user_parts.push(UserPart::Text(text.into()));
        self
    }

    pub fn image(mut self, image: Arc<RgbImage>) -> Self {
        self.user_parts.push(UserPart::Image(image));
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature_hint = t;
        self
    }

    /// System text followed by every text part, newline separated.
    pub fn full_text(&self) -> String {
        let mut out = self.system_text.clone();
        for part in &self.user_parts {
            if let UserPart::Text(t) = part {
                out.push('\n');
                out.push_str(t);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse {
    pub payload: Value,
    pub raw_text: String,
    pub attempts: u32,
}

/// Unit-norm image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingVector {
    /// Scales `raw` to unit length. Fails on empty, zero, or non-finite input.
    pub fn normalized(raw: Vec<f64>) -> Result<Self, String> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err("embedding must be a non-empty finite vector".into());
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err("embedding has zero norm".into());
        }
        Ok(EmbeddingVector {
            values: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Accepts an already-normalized vector, checking its norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, String> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(format!("embedding norm {norm} is not 1"));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn negated(&self) -> Self {
        EmbeddingVector {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;
    fn try_from(v: Vec<f64>) -> Result<Self, String> {
        EmbeddingVector::from_unit(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Vec<f64> {
        e.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Image,
}

/// One backend call as seen by the gateway; kept for auditing prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedRequest {
    pub kind: RequestKind,
    pub tag: String,
    pub attempt: u32,
    /// Chat: system text and text parts. Image: the prompt.
    pub text: String,
    pub images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    pub max_retries: u32,
    pub parallelism: usize,
    /// Engines replace model calls with deterministic heuristics where one
    /// exists (conflict detection, component mapping, overlap resolution).
    pub heuristics: bool,
    /// Keep every request in the in-memory log. Long-running servers turn
    /// this off.
    pub record_requests: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_retries: DEFAULT_MAX_RETRIES,
            parallelism: DEFAULT_PARALLELISM,
            heuristics: false,
            record_requests: true,
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    schemas: SchemaRegistry,
    assets: AssetStore,
    config: GatewayConfig,
    log: Mutex<Vec<LoggedRequest>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, assets: AssetStore, config: GatewayConfig) -> Self {
        Gateway {
            backend,
            schemas: SchemaRegistry::standard(),
            assets,
            config,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Scripted fixtures from a directory, in-memory assets, default config.
    pub fn scripted(dir: impl Into<std::path::PathBuf>) -> Self {
        Self::new(Arc::new(ScriptedBackend::from_dir(dir)), AssetStore::in_memory(), GatewayConfig::default())
    }

    /// Heuristic mode with synthetic images and embeddings; no chat model.
    pub fn fallback() -> Self {
        Self::new(
            Arc::new(FallbackBackend::new()),
            AssetStore::in_memory(),
            GatewayConfig {
                heuristics: true,
                ..GatewayConfig::default()
            },
        )
    }

    pub fn with_schemas(mut self, schemas: SchemaRegistry) -> Self {
        self.schemas = schemas;
        self
    }

    pub fn config(&self) -> GatewayConfig {
        self.config
    }

    /// Engines use deterministic heuristics instead of the model for conflict
    /// detection, component mapping and overlap resolution.
    pub fn heuristics(&self) -> bool {
        self.config.heuristics || !self.backend.supports_chat()
    }

    /// Whether chat completions can succeed at all.
    pub fn has_chat(&self) -> bool {
        self.backend.supports_chat()
    }

    pub fn assets(&self) -> &AssetStore {
        &self.assets
    }

    pub fn backend_name(&self) -> String {
        self.backend.name().to_string()
    }

    pub fn embedder_id(&self) -> String {
        self.backend.embedder_id()
    }

    pub fn request_log(&self) -> Vec<LoggedRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("log lock").clear();
    }

    fn record(&self, entry: LoggedRequest) {
        if !self.config.record_requests {
            return;
        }
        self.log.lock().expect("log lock").push(entry);
    }

    fn check_request(&self, req: &ModelRequest) -> Result<(), GatewayError> {
        if req.tag.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("request has no tag".into()));
        }
        if !self.schemas.contains(&req.schema_id) {
            return Err(GatewayError::InvalidRequest(format!("schema `{}` is not registered", req.schema_id)));
        }
        if !(0.0..=2.0).contains(&req.temperature_hint) {
            return Err(GatewayError::InvalidRequest("temperature_hint must lie in [0, 2]".into()));
        }
        Ok(())
    }

    /// Chat completion whose payload validates against `req.schema_id`.
    pub fn complete_structured(&self, req: &ModelRequest) -> Result<StructuredResponse, GatewayError> {
        self.complete_inner(req, None, &|_| Ok(()))
    }

    /// Typed completion with an extra caller-side check folded into the
    /// retry loop.
    pub fn complete<T: ResponseSchema>(
        &self,
        req: &ModelRequest,
        check: &(dyn Fn(&T) -> Result<(), String> + Sync),
    ) -> Result<(T, StructuredResponse), GatewayError> {
        self.complete_reserved(req, None, check)
    }

    fn complete_reserved<T: ResponseSchema>(
        &self,
        req: &ModelRequest,
        sequence: Option<u32>,
        check: &(dyn Fn(&T) -> Result<(), String> + Sync),
    ) -> Result<(T, StructuredResponse), GatewayError> {
        let extra = |v: &Value| -> Result<(), String> {
            let typed: T = decode(v)?;
            check(&typed)
        };
        let resp = self.complete_inner(req, sequence, &extra)?;
        let typed = decode(&resp.payload).map_err(|m| GatewayError::generation(&req.tag, m))?;
        Ok((typed, resp))
    }

    fn complete_inner(
        &self,
        req: &ModelRequest,
        sequence: Option<u32>,
        extra: &dyn Fn(&Value) -> Result<(), String>,
    ) -> Result<StructuredResponse, GatewayError> {
        self.check_request(req)?;
        let mut current = req.clone();
        let mut last_raw: Option<String> = None;
        let mut last_err = String::new();
        let max_attempts = self.config.max_retries + 1;
        for attempt in 1..=max_attempts {
            self.record(LoggedRequest {
                kind: RequestKind::Chat,
                tag: current.tag.clone(),
                attempt,
                text: current.full_text(),
                images: current.user_parts.iter().filter(|p| matches!(p, UserPart::Image(_))).count(),
            });
            let seq = if attempt == 1 { sequence } else { None };
            let raw = match self.backend.chat(&current, seq) {
                Ok(raw) => raw,
                Err(GatewayError::Generation { message, .. }) => {
                    return Err(GatewayError::Generation {
                        tag: req.tag.clone(),
                        message,
                        raw_text: last_raw,
                        attempts: attempt,
                    })
                }
                Err(other) => return Err(other),
            };
            let verdict = extract_json(&raw)
                .and_then(|v| self.schemas.validate(&req.schema_id, &v).map(|_| v))
                .and_then(|v| extra(&v).map(|_| v));
            match verdict {
                Ok(payload) => {
                    return Ok(StructuredResponse {
                        payload,
                        raw_text: raw,
                        attempts: attempt,
                    })
                }
                Err(e) => {
                    tracing::debug!(tag = %req.tag, attempt, error = %e, "reply rejected");
                    current.user_parts.push(UserPart::Text(format!(
                        "Your previous reply was rejected: {e}\nPrevious reply:\n{raw}\n\
                         Reply again with a single JSON object that fixes the problem."
                    )));
                    last_err = e;
                    last_raw = Some(raw);
                }
            }
        }
        Err(GatewayError::Generation {
            tag: req.tag.clone(),
            message: format!("reply invalid after {max_attempts} attempt(s): {last_err}"),
            raw_text: last_raw,
            attempts: max_attempts,
        })
    }

    /// Runs a batch of typed completions with bounded fan-out. Results come
    /// back in input order. Fixture sequence numbers are reserved in input
    /// order before dispatch, so scripted runs do not depend on scheduling.
    /// `check` receives the request index alongside the typed reply.
    pub fn complete_batch<T: ResponseSchema + Send>(
        &self,
        reqs: &[ModelRequest],
        check: &(dyn Fn(usize, &T) -> Result<(), String> + Sync),
    ) -> Vec<Result<(T, StructuredResponse), GatewayError>> {
        let sequences: Vec<Option<u32>> = reqs.iter().map(|r| self.backend.reserve(&r.tag)).collect();
        parallel_map(reqs, self.config.parallelism, |i, req| {
            self.complete_reserved(req, sequences[i], &|t: &T| check(i, t))
        })
    }

    /// Generates an image and stores it, returning its content address.
    pub fn generate_image(&self, tag: &str, prompt: &str) -> Result<AssetRef, GatewayError> {
        self.generate_image_reserved(tag, prompt, None)
    }

    fn generate_image_reserved(&self, tag: &str, prompt: &str, seq: Option<u32>) -> Result<AssetRef, GatewayError> {
        if tag.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("request has no tag".into()));
        }
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("image prompt is empty".into()));
        }
        self.record(LoggedRequest {
            kind: RequestKind::Image,
            tag: tag.to_string(),
            attempt: 1,
            text: prompt.to_string(),
            images: 0,
        });
        let img = self.backend.generate_image(tag, prompt, seq)?;
        self.assets.put(&img)
    }

    pub fn generate_images(&self, tag: &str, prompts: &[String]) -> Vec<Result<AssetRef, GatewayError>> {
        let image_key = backend::image_counter_key(tag);
        let sequences: Vec<Option<u32>> = prompts.iter().map(|_| self.backend.reserve(&image_key)).collect();
        parallel_map(prompts, self.config.parallelism, |i, p| {
            self.generate_image_reserved(tag, p, sequences[i])
        })
    }

    pub fn embed_image(&self, image: &RgbImage) -> Result<EmbeddingVector, GatewayError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(GatewayError::InvalidRequest("cannot embed an empty image".into()));
        }
        let raw = self.backend.embed_image(image)?;
        EmbeddingVector::normalized(raw).map_err(GatewayError::Transport)
    }

    /// Bounded-parallel map using this gateway's parallelism.
    pub fn parallel<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
        parallel_map(items, self.config.parallelism, f)
    }
}

fn decode<T: DeserializeOwned + ResponseSchema>(v: &Value) -> Result<T, String> {
    let typed: T = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    typed.check()?;
    Ok(typed)
}

/// Parses a model reply as JSON, tolerating a surrounding code fence.
fn extract_json(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    let body = if let Some(rest) = trimmed.strip_prefix("```") {
        let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
        rest.trim_end().trim_end_matches("```")
    } else {
        trimmed
    };
    serde_json::from_str(body.trim()).map_err(|e| format!("reply is not valid JSON: {e}"))
}

/// Applies `f` to every item with at most `parallelism` threads; output in
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

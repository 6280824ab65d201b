//! Backend for OpenAI-compatible HTTP endpoints: `/chat/completions`,
//! `/images/generations` (base64 replies) and `/embeddings`. The embedding
//! endpoint receives the image as a PNG data URL.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::assets::{decode_png, encode_png};
use super::backend::Backend;
use super::{GatewayError, ModelRequest, UserPart};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    pub base_url: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub chat_model: String,
    pub image_model: String,
    pub embed_model: String,
    pub image_size: String,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            chat_model: "gpt-4o".into(),
            image_model: "gpt-image-1".into(),
            embed_model: "clip-vit-b-32".into(),
            image_size: "1024x1024".into(),
            timeout_secs: 120,
        }
    }
}

impl LiveConfig {
    /// Overlays `MODEL_BASE_URL` and `MODEL_API_KEY` from the environment.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var("MODEL_BASE_URL") {
            if !url.trim().is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var("MODEL_API_KEY") {
            if !key.trim().is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(LiveBackend { config, client })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let mut rb = self.client.post(&url).json(body);
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| GatewayError::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(300).collect();
            return Err(GatewayError::Transport(format!("{url}: HTTP {status}: {snippet}")));
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Transport(format!("{url}: malformed reply: {e}")))
    }
}

fn data_url(img: &RgbImage) -> Result<String, GatewayError> {
    Ok(format!("data:image/png;base64,{}", B64.encode(encode_png(img)?)))
}

fn chat_body(config: &LiveConfig, req: &ModelRequest) -> Result<Value, GatewayError> {
    let mut content = Vec::new();
    for part in &req.user_parts {
        match part {
            UserPart::Text(t) => content.push(json!({"type": "text", "text": t})),
            UserPart::Image(img) => content.push(json!({"type": "image_url", "image_url": {"url": data_url(img)?}})),
        }
    }
    Ok(json!({
        "model": config.chat_model,
        "temperature": req.temperature_hint,
        "response_format": {"type": "json_object"},
        "messages": [
            {"role": "system", "content": req.system_text},
            {"role": "user", "content": content},
        ],
    }))
}

impl Backend for LiveBackend {
    fn name(&self) -> &str {
        "live"
    }

    fn chat(&self, req: &ModelRequest, _: Option<u32>) -> Result<String, GatewayError> {
        let reply = self.post("chat/completions", &chat_body(&self.config, req)?)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::generation(&req.tag, "reply has no message content"))
    }

    fn generate_image(&self, tag: &str, prompt: &str, _: Option<u32>) -> Result<RgbImage, GatewayError> {
        let body = json!({
            "model": self.config.image_model,
            "prompt": prompt,
            "n": 1,
            "size": self.config.image_size,
            "response_format": "b64_json",
        });
        let reply = self.post("images/generations", &body)?;
        let b64 = reply["data"][0]["b64_json"]
            .as_str()
            .ok_or_else(|| GatewayError::generation(tag, "image reply has no b64_json"))?;
        let bytes = B64.decode(b64).map_err(|e| GatewayError::generation(tag, e.to_string()))?;
        decode_png(&bytes)
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>, GatewayError> {
        let body = json!({"model": self.config.embed_model, "input": [data_url(img)?]});
        let reply = self.post("embeddings", &body)?;
        let arr = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::Transport("embedding reply has no vector".into()))?;
        arr.iter()
            .map(|v| v.as_f64().ok_or_else(|| GatewayError::Transport("non-numeric embedding".into())))
            .collect()
    }

    fn embedder_id(&self) -> String {
        format!("live:{}", self.config.embed_model)
    }
}

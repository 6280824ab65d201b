use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use image::RgbImage;
use serde_json::Value;

use super::assets::{decode_png, encode_png};
use super::synthetic::{placeholder_image, SyntheticEmbedder};
use super::{GatewayError, ModelRequest};

/// A model provider. Implementations must be safe to call from several
/// threads at once.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw reply text for a chat request. `sequence` is a fixture number
    /// reserved earlier with [`Backend::reserve`]; `None` means "next".
    fn chat(&self, req: &ModelRequest, sequence: Option<u32>) -> Result<String, GatewayError>;

    fn generate_image(&self, tag: &str, prompt: &str, sequence: Option<u32>) -> Result<RgbImage, GatewayError>;

    /// Raw (not necessarily normalized) embedding.
    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>, GatewayError>;

    /// Identifies the embedding space; indices built with one embedder are
    /// not comparable with another's.
    fn embedder_id(&self) -> String;

    /// Claims the next fixture number for `key`. Only meaningful for
    /// backends that replay numbered fixtures.
    fn reserve(&self, _key: &str) -> Option<u32> {
        None
    }

    /// False when `chat` always fails; engines then use their heuristics.
    fn supports_chat(&self) -> bool {
        true
    }
}

pub(crate) fn image_counter_key(tag: &str) -> String {
    format!("image:{tag}")
}

enum FixtureSource {
    Dir(PathBuf),
    Memory(HashMap<String, Vec<u8>>),
}

/// Replays fixtures named `<tag>.<n>.json` (chat) and `<tag>.<n>.png`
/// (images), where `n` counts calls per tag from 1. A missing chat fixture
/// is an error; a missing image fixture yields a synthetic image derived
/// from the prompt.
pub struct ScriptedBackend {
    source: FixtureSource,
    counters: Mutex<HashMap<String, u32>>,
    embedder: SyntheticEmbedder,
}

impl ScriptedBackend {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self::with_source(FixtureSource::Dir(dir.into()))
    }

    pub fn in_memory() -> Self {
        Self::with_source(FixtureSource::Memory(HashMap::new()))
    }

    fn with_source(source: FixtureSource) -> Self {
        ScriptedBackend {
            source,
            counters: Mutex::new(HashMap::new()),
            embedder: SyntheticEmbedder::new(),
        }
    }

    fn next_free(&self, tag: &str, ext: &str) -> u32 {
        let FixtureSource::Memory(m) = &self.source else {
            panic!("fixtures can only be added to an in-memory backend");
        };
        (1..).find(|n| !m.contains_key(&format!("{tag}.{n}.{ext}"))).expect("unbounded")
    }

    fn insert(mut self, name: String, bytes: Vec<u8>) -> Self {
        if let FixtureSource::Memory(m) = &mut self.source {
            m.insert(name, bytes);
        }
        self
    }

    /// Appends the next chat fixture for `tag`.
    pub fn with_chat(self, tag: &str, payload: Value) -> Self {
        self.with_chat_raw(tag, &payload.to_string())
    }

    pub fn with_chat_raw(self, tag: &str, raw: &str) -> Self {
        let n = self.next_free(tag, "json");
        self.insert(format!("{tag}.{n}.json"), raw.as_bytes().to_vec())
    }

    pub fn with_image(self, tag: &str, img: &RgbImage) -> Self {
        let n = self.next_free(tag, "png");
        let bytes = encode_png(img).expect("encode png");
        self.insert(format!("{tag}.{n}.png"), bytes)
    }

    fn read(&self, name: &str) -> Option<Vec<u8>> {
        match &self.source {
            FixtureSource::Dir(d) => std::fs::read(d.join(name)).ok(),
            FixtureSource::Memory(m) => m.get(name).cloned(),
        }
    }

    fn take(&self, key: &str) -> u32 {
        let mut c = self.counters.lock().expect("counter lock");
        let n = c.entry(key.to_string()).or_insert(0);
        *n += 1;
        *n
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, req: &ModelRequest, sequence: Option<u32>) -> Result<String, GatewayError> {
        let n = sequence.unwrap_or_else(|| self.take(&req.tag));
        let name = format!("{}.{n}.json", req.tag);
        let bytes = self
            .read(&name)
            .ok_or_else(|| GatewayError::generation(&req.tag, format!("no scripted fixture `{name}` for tag `{}`", req.tag)))?;
        String::from_utf8(bytes).map_err(|_| GatewayError::generation(&req.tag, format!("fixture `{name}` is not UTF-8")))
    }

    fn generate_image(&self, tag: &str, prompt: &str, sequence: Option<u32>) -> Result<RgbImage, GatewayError> {
        let n = sequence.unwrap_or_else(|| self.take(&image_counter_key(tag)));
        match self.read(&format!("{tag}.{n}.png")) {
            Some(bytes) => decode_png(&bytes),
            None => Ok(placeholder_image(prompt)),
        }
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>, GatewayError> {
        Ok(self.embedder.embed(img))
    }

    fn embedder_id(&self) -> String {
        SyntheticEmbedder::ID.to_string()
    }

    fn reserve(&self, key: &str) -> Option<u32> {
        Some(self.take(key))
    }
}

/// No chat model at all; images and embeddings are synthetic. Pair with
/// heuristic mode.
pub struct FallbackBackend {
    embedder: SyntheticEmbedder,
}

impl FallbackBackend {
    pub fn new() -> Self {
        FallbackBackend {
            embedder: SyntheticEmbedder::new(),
        }
    }
}

impl Default for FallbackBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for FallbackBackend {
    fn name(&self) -> &str {
        "fallback"
    }

    fn chat(&self, req: &ModelRequest, _: Option<u32>) -> Result<String, GatewayError> {
        Err(GatewayError::Unsupported {
            backend: "fallback".into(),
            tag: req.tag.clone(),
        })
    }

    fn generate_image(&self, _tag: &str, prompt: &str, _: Option<u32>) -> Result<RgbImage, GatewayError> {
        Ok(placeholder_image(prompt))
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f64>, GatewayError> {
        Ok(self.embedder.embed(img))
    }

    fn embedder_id(&self) -> String {
        SyntheticEmbedder::ID.to_string()
    }

    fn supports_chat(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dir_fixtures_counted_per_tag() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.1.json"), "{\"n\":1}").unwrap();
        std::fs::write(dir.path().join("a.2.json"), "{\"n\":2}").unwrap();
        std::fs::write(dir.path().join("b.1.json"), "{\"n\":3}").unwrap();
        let b = ScriptedBackend::from_dir(dir.path());
        let req = |t: &str| ModelRequest::new(t, "any");
        assert_eq!(b.chat(&req("a"), None).unwrap(), "{\"n\":1}");
        assert_eq!(b.chat(&req("b"), None).unwrap(), "{\"n\":3}");
        assert_eq!(b.chat(&req("a"), None).unwrap(), "{\"n\":2}");
        assert!(b.chat(&req("a"), None).is_err());
    }

    #[test]
    fn image_fixture_used_when_present() {
        let img = RgbImage::from_pixel(3, 3, image::Rgb([1, 2, 3]));
        let b = ScriptedBackend::in_memory().with_image("avatar", &img).with_chat("x", json!({}));
        assert_eq!(b.generate_image("avatar", "p", None).unwrap(), img);
        assert_eq!(b.generate_image("avatar", "p", None).unwrap(), placeholder_image("p"));
    }
}

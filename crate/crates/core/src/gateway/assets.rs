//! Content-addressed PNG store. References look like `asset:<sha256 hex>`,
//! where the hash covers the image dimensions and raw RGB pixels.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;
use crate::canvas::AssetResolver;

pub const ASSET_SCHEME: &str = "asset:";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetRef(String);

impl AssetRef {
    pub fn parse(s: &str) -> Option<AssetRef> {
        let hex = s.strip_prefix(ASSET_SCHEME)?;
        (hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()))
            .then(|| AssetRef(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn digest(&self) -> &str {
        &self.0[ASSET_SCHEME.len()..]
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.digest())
    }
}

impl std::fmt::Display for AssetRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn content_digest(img: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, GatewayError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| GatewayError::Asset(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, GatewayError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|d| d.to_rgb8())
        .map_err(|e| GatewayError::Asset(format!("not a PNG: {e}")))
}

/// Cheap to clone; clones share storage.
#[derive(Clone)]
pub struct AssetStore {
    dir: Option<PathBuf>,
    cache: Arc<Mutex<HashMap<String, Arc<RgbImage>>>>,
}

impl AssetStore {
    pub fn in_memory() -> Self {
        AssetStore {
            dir: None,
            cache: Arc::default(),
        }
    }

    /// Stores PNGs under `dir`, creating it if needed.
    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| GatewayError::Asset(format!("{}: {e}", dir.display())))?;
        Ok(AssetStore {
            dir: Some(dir),
            cache: Arc::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn put(&self, img: &RgbImage) -> Result<AssetRef, GatewayError> {
        let digest = content_digest(img);
        let r = AssetRef(format!("{ASSET_SCHEME}{digest}"));
        if let Some(dir) = &self.dir {
            let path = dir.join(r.file_name());
            if !path.exists() {
                let bytes = encode_png(img)?;
                let tmp = dir.join(format!(".{}.tmp", r.file_name()));
                std::fs::write(&tmp, bytes)
                    .and_then(|_| std::fs::rename(&tmp, &path))
                    .map_err(|e| GatewayError::Asset(format!("{}: {e}", path.display())))?;
            }
        }
        self.cache.lock().expect("asset lock").insert(digest, Arc::new(img.clone()));
        Ok(r)
    }

    pub fn get(&self, r: &AssetRef) -> Option<Arc<RgbImage>> {
        if let Some(img) = self.cache.lock().expect("asset lock").get(r.digest()) {
            return Some(img.clone());
        }
        let path = self.dir.as_ref()?.join(r.file_name());
        let img = Arc::new(decode_png(&std::fs::read(path).ok()?).ok()?);
        self.cache.lock().expect("asset lock").insert(r.digest().to_string(), img.clone());
        Some(img)
    }

    pub fn png_bytes(&self, r: &AssetRef) -> Option<Vec<u8>> {
        if let Some(dir) = &self.dir {
            if let Ok(bytes) = std::fs::read(dir.join(r.file_name())) {
                return Some(bytes);
            }
        }
        encode_png(self.get(r)?.as_ref()).ok()
    }

    /// Every reference currently held, sorted.
    pub fn refs(&self) -> Vec<AssetRef> {
        let mut out: Vec<AssetRef> = self
            .cache
            .lock()
            .expect("asset lock")
            .keys()
            .map(|d| AssetRef(format!("{ASSET_SCHEME}{d}")))
            .collect();
        if let Some(dir) = &self.dir {
            if let Ok(rd) = std::fs::read_dir(dir) {
                for entry in rd.flatten() {
                    let name = entry.file_name().to_string_lossy().to_string();
                    if let Some(r) = name.strip_suffix(".png").and_then(|d| AssetRef::parse(&format!("{ASSET_SCHEME}{d}"))) {
                        out.push(r);
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Copies an asset in from PNG bytes, checking the content address.
    pub fn import_png(&self, r: &AssetRef, bytes: &[u8]) -> Result<(), GatewayError> {
        let img = decode_png(bytes)?;
        let got = self.put(&img)?;
        if &got != r {
            return Err(GatewayError::Asset(format!("content of {r} hashes to {got}")));
        }
        Ok(())
    }
}

impl AssetResolver for AssetStore {
    fn resolve(&self, reference: &str) -> Option<RgbImage> {
        self.get(&AssetRef::parse(reference)?).map(|a| (*a).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = AssetStore::on_disk(dir.path()).unwrap();
        let img = RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8 * 50, y as u8 * 70, 9]));
        let r = store.put(&img).unwrap();
        assert!(dir.path().join(r.file_name()).exists());
        let fresh = AssetStore::on_disk(dir.path()).unwrap();
        assert_eq!(*fresh.get(&r).unwrap(), img);
        assert_eq!(fresh.resolve(r.as_str()).unwrap(), img);
        assert_eq!(fresh.refs(), vec![r.clone()]);
        let bytes = fresh.png_bytes(&r).unwrap();
        AssetStore::in_memory().import_png(&r, &bytes).unwrap();
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(AssetRef::parse("asset:abc").is_none());
        assert!(AssetRef::parse("https://x/y.png").is_none());
    }
}

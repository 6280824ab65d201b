//! Template index: ingest, flat-file persistence, exhaustive ranking.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "PTIX"
//! version      u32      1
//! embedder_id  u32 length + UTF-8 bytes
//! dimension    u32
//! count        u32
//! count rows:
//!   template_id  u32 length + UTF-8 bytes
//!   vector       dimension × f64
//! ```
//!
//! Rows are sorted by template id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cosine_similarity, RankedTemplate, RankedTemplates, ThemeError, ThemeTemplate};
use crate::canvas::{parse_document, rasterize_with, CanvasDocument};
use crate::feedback::ThemeDescriptor;
use crate::gateway::{EmbeddingVector, Gateway};

pub const INDEX_MAGIC: &[u8; 4] = b"PTIX";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 12;
pub const TAG_PROBE: &str = "theme.probe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateIndex {
    pub embedder_id: String,
    pub dimension: usize,
    /// Sorted by id, ids unique.
    pub entries: Vec<(String, EmbeddingVector)>,
}

impl TemplateIndex {
    pub fn new(embedder_id: impl Into<String>, mut entries: Vec<(String, EmbeddingVector)>) -> Result<Self, ThemeError> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let dimension = entries.first().map(|e| e.1.dimension()).unwrap_or(0);
        let mut seen = BTreeSet::new();
        for (id, v) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(ThemeError::Format(format!("duplicate template id `{id}`")));
            }
            if v.dimension() != dimension {
                return Err(ThemeError::DimensionMismatch {
                    expected: dimension,
                    actual: v.dimension(),
                });
            }
        }
        Ok(TemplateIndex {
            embedder_id: embedder_id.into(),
            dimension,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries
            .binary_search_by(|e| e.0.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        put_str(&mut out, &self.embedder_id);
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, v) in &self.entries {
            put_str(&mut out, id);
            for x in v.values() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ThemeError> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(ThemeError::Format("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != INDEX_VERSION {
            return Err(ThemeError::Format(format!("unsupported version {version}")));
        }
        let embedder_id = get_str(r)?;
        let dimension = get_u32(r)? as usize;
        let count = get_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = get_str(r)?;
            let mut v = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                v.push(f64::from_le_bytes(b));
            }
            let v = EmbeddingVector::from_unit(v).map_err(|e| ThemeError::Format(format!("row `{id}`: {e}")))?;
            entries.push((id, v));
        }
        if !r.is_empty() {
            return Err(ThemeError::Format("trailing bytes".into()));
        }
        let index = TemplateIndex::new(embedder_id, entries)?;
        if index.dimension != dimension && count > 0 {
            return Err(ThemeError::Format("dimension header disagrees with rows".into()));
        }
        Ok(TemplateIndex { dimension, ..index })
    }

    pub fn save(&self, path: &Path) -> Result<(), ThemeError> {
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| ThemeError::Io(format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ThemeError> {
        let bytes = std::fs::read(path).map_err(|e| ThemeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), ThemeError> {
    r.read_exact(buf).map_err(|_| ThemeError::Format("truncated file".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32, ThemeError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String, ThemeError> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return Err(ThemeError::Format("truncated file".into()));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| ThemeError::Format("string is not UTF-8".into()))
}

/// Loads every `*.json` template under `dir`, keyed by file stem. Files that
/// fail to parse are reported as warnings.
pub fn load_corpus(dir: &Path) -> Result<(BTreeMap<String, CanvasDocument>, Vec<String>), ThemeError> {
    let rd = std::fs::read_dir(dir).map_err(|e| ThemeError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = rd
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut docs = BTreeMap::new();
    let mut warnings = Vec::new();
    for p in paths {
        let id = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        match std::fs::read_to_string(&p).map_err(|e| e.to_string()).and_then(|s| parse_document(&s).map_err(|e| e.to_string())) {
            Ok(doc) => {
                docs.insert(id, doc);
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", p.display())),
        }
    }
    Ok((docs, warnings))
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub index: TemplateIndex,
    pub templates: Vec<ThemeTemplate>,
    pub warnings: Vec<String>,
}

/// Rasterizes and embeds every template in `dir` with bounded fan-out.
pub fn ingest_templates(gw: &Gateway, dir: &Path) -> Result<IngestReport, ThemeError> {
    let (docs, mut warnings) = load_corpus(dir)?;
    let docs: Vec<(String, CanvasDocument)> = docs.into_iter().collect();
    let embedded = gw.parallel(&docs, |_, (id, doc)| -> Result<ThemeTemplate, String> {
        let img = rasterize_with(doc, gw.assets()).map_err(|e| e.to_string())?;
        let embedding = gw.embed_image(&img).map_err(|e| e.to_string())?;
        let preview_image = gw.assets().put(&img).map_err(|e| e.to_string())?;
        Ok(ThemeTemplate {
            template_id: id.clone(),
            document: doc.clone(),
            embedding,
            preview_image,
        })
    });
    let mut templates = Vec::new();
    for ((id, _), r) in docs.iter().zip(embedded) {
        match r {
            Ok(t) => templates.push(t),
            Err(e) => warnings.push(format!("skipped {id}: {e}")),
        }
    }
    if templates.is_empty() {
        return Err(ThemeError::EmptyCorpus);
    }
    let index = TemplateIndex::new(
        gw.embedder_id(),
        templates.iter().map(|t| (t.template_id.clone(), t.embedding.clone())).collect(),
    )?;
    Ok(IngestReport {
        index,
        templates,
        warnings,
    })
}

pub fn probe_prompt(d: &ThemeDescriptor) -> String {
    format!("poster design, tone: {}, colors: {}", d.tone.trim(), d.color.trim())
}

/// Top-k entries by cosine similarity to `query`, ties by id ascending.
pub fn rank(index: &TemplateIndex, query: &EmbeddingVector, k: usize) -> Result<Vec<RankedTemplate>, ThemeError> {
    if k == 0 {
        return Err(ThemeError::InvalidK);
    }
    if query.dimension() != index.dimension {
        return Err(ThemeError::DimensionMismatch {
            expected: index.dimension,
            actual: query.dimension(),
        });
    }
    let mut ranked = index
        .entries
        .iter()
        .map(|(id, v)| {
            Ok(RankedTemplate {
                template_id: id.clone(),
                similarity: cosine_similarity(query, v)?,
            })
        })
        .collect::<Result<Vec<_>, ThemeError>>()?;
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.template_id.cmp(&b.template_id)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Generates a probe image for the descriptor, embeds it, and ranks the
/// index against it.
pub fn query_templates(gw: &Gateway, index: &TemplateIndex, descriptor: &ThemeDescriptor, k: usize) -> Result<RankedTemplates, ThemeError> {
    if k == 0 {
        return Err(ThemeError::InvalidK);
    }
    if index.is_empty() {
        return Err(ThemeError::EmptyCorpus);
    }
    if index.embedder_id != gw.embedder_id() {
        return Err(ThemeError::EmbedderMismatch {
            expected: index.embedder_id.clone(),
            actual: gw.embedder_id(),
        });
    }
    let asset = gw.generate_image(TAG_PROBE, &probe_prompt(descriptor))?;
    let img = gw
        .assets()
        .get(&asset)
        .ok_or_else(|| ThemeError::Io(format!("probe image {asset} vanished from the asset store")))?;
    let probe = gw.embed_image(&img)?;
    Ok(RankedTemplates {
        query: descriptor.clone(),
        ranked: rank(index, &probe, k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn small_index() -> TemplateIndex {
        TemplateIndex::new(
            "test",
            vec![
                ("b".into(), unit(&[1.0, 0.0])),
                ("a".into(), unit(&[1.0, 0.0])),
                ("c".into(), unit(&[0.0, 1.0])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let idx = small_index();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..4], b"PTIX");
        assert_eq!(TemplateIndex::from_bytes(&bytes).unwrap(), idx);
        assert!(TemplateIndex::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn header_layout() {
        let idx = TemplateIndex::new("e", vec![("t".into(), unit(&[1.0]))]).unwrap();
        let mut want = b"PTIX".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"e");
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"t");
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(idx.to_bytes(), want);
    }

    #[test]
    fn ties_break_by_id() {
        let r = rank(&small_index(), &unit(&[1.0, 0.0]), 10).unwrap();
        let ids: Vec<_> = r.iter().map(|t| t.template_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(rank(&small_index(), &unit(&[0.0, 1.0]), 1).unwrap()[0].template_id, "c");
        assert!(matches!(rank(&small_index(), &unit(&[1.0]), 1), Err(ThemeError::DimensionMismatch { .. })));
        assert!(matches!(rank(&small_index(), &unit(&[1.0, 0.0]), 0), Err(ThemeError::InvalidK)));
    }

    #[test]
    fn probe_prompt_text() {
        let d = ThemeDescriptor {
            tone: "warm".into(),
            color: "earth tones".into(),
        };
        assert_eq!(probe_prompt(&d), "poster design, tone: warm, colors: earth tones");
    }
}

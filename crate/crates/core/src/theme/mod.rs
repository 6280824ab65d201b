//! Theme templates: an embedded index over a corpus of template documents,
//! tone/color queries ranked by cosine similarity, and applying a chosen
//! template to a poster.

mod apply;
mod index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{CanvasDocument, CanvasError};
use crate::feedback::ThemeDescriptor;
use crate::gateway::{AssetRef, EmbeddingVector, GatewayError};

pub use apply::{
    apply_theme, extract_embellishments, map_components, reinsert_embellishments, resolve_overlaps, MappingReply,
    OverlapOutcome, OverlapReply, ThemeOutcome, DEFAULT_OVERLAP_ROUNDS, TAG_MAP, TAG_OVERLAP,
};
pub use index::{
    ingest_templates, load_corpus, probe_prompt, query_templates, rank, IngestReport, TemplateIndex, DEFAULT_K,
    INDEX_MAGIC, INDEX_VERSION, TAG_PROBE,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ThemeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error("embedding dimension {actual} does not match {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedder `{actual}` differs from the index's `{expected}`")]
    EmbedderMismatch { expected: String, actual: String },
    #[error("template corpus is empty")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("index file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeTemplate {
    pub template_id: String,
    pub document: CanvasDocument,
    pub embedding: EmbeddingVector,
    pub preview_image: AssetRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTemplate {
    pub template_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTemplates {
    pub query: ThemeDescriptor,
    pub ranked: Vec<RankedTemplate>,
}

/// Dot product of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ThemeError> {
    if a.dimension() != b.dimension() {
        return Err(ThemeError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    #[test]
    fn identity_and_antipode() {
        let v = unit(vec![0.3, -1.2, 2.0, 0.01]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &v.negated()).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatch() {
        assert!(matches!(
            cosine_similarity(&unit(vec![1.0, 0.0]), &unit(vec![1.0, 0.0, 0.0])),
            Err(ThemeError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }
}

//! Poster document model.
//!
//! A [`CanvasDocument`] is a page size plus an ordered list of elements. List
//! order is render order: later elements are drawn on top. The JSON wire form
//! mirrors the `children`-array layout exported by common canvas editors; see
//! [`codec`] for the canonical encoding.

mod codec;
pub mod diff;
mod edit;
mod geometry;
mod raster;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde_json::Value;
use thiserror::Error;

pub use codec::{document_from_value, parse_document, serialize_document};
pub use edit::{apply_adjustment, set_image_source, set_text, Adjustment, AdjustmentKind};
pub use geometry::{bounding_box, detect_overlaps, total_overlap_area, Overlap, Rect, DEFAULT_MIN_OVERLAP_FRACTION};
pub use raster::{parse_color, rasterize, rasterize_with, AssetResolver, NoAssets, BACKGROUND, PLACEHOLDER};

/// Largest page side the rasterizer accepts.
pub const MAX_PAGE_SIDE: u32 = 16_384;

pub const CURRENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CanvasError {
    #[error("malformed document at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid document: {0}")]
    Invalid(String),
    #[error("duplicate element ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("no element with id `{0}`")]
    NotFound(String),
    #[error("element `{id}` is {actual}, expected {expected}")]
    KindMismatch {
        id: String,
        expected: ElementKind,
        actual: ElementKind,
    },
    #[error("invalid adjustment for `{id}`: {reason}")]
    InvalidAdjustment { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Text,
    Image,
    Vector,
}

impl ElementKind {
    /// Name used in the `type` field of the wire format.
    pub fn wire_name(self) -> &'static str {
        match self {
            ElementKind::Text => "text",
            ElementKind::Image => "image",
            ElementKind::Vector => "svg",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementKind::Text => "text",
            ElementKind::Image => "image",
            ElementKind::Vector => "vector",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextPayload {
    pub content: String,
    /// Points; the rasterizer treats one point as one pixel.
    pub font_size: f64,
    pub font_family: String,
    pub fill: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePayload {
    /// URL or content-addressed asset id.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorPayload {
    /// SVG markup or an asset reference.
    pub data: String,
    pub z_hint: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Text(TextPayload),
    Image(ImagePayload),
    Vector(VectorPayload),
}

impl Payload {
    pub fn kind(&self) -> ElementKind {
        match self {
            Payload::Text(_) => ElementKind::Text,
            Payload::Image(_) => ElementKind::Image,
            Payload::Vector(_) => ElementKind::Vector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Degrees, clockwise, about the element center.
    pub rotation: f64,
    pub payload: Payload,
    /// Keys the model does not interpret, re-emitted verbatim.
    pub extra: BTreeMap<String, Value>,
}

pub const DEFAULT_FONT_SIZE: f64 = 24.0;
pub const DEFAULT_FONT_FAMILY: &str = "Roboto";
pub const DEFAULT_FILL: &str = "black";

impl Element {
    fn with_payload(id: impl Into<String>, x: f64, y: f64, width: f64, height: f64, payload: Payload) -> Self {
        Element {
            id: id.into(),
            x,
            y,
            width,
            height,
            rotation: 0.0,
            payload,
            extra: BTreeMap::new(),
        }
    }

    pub fn text(id: impl Into<String>, x: f64, y: f64, width: f64, height: f64, content: impl Into<String>) -> Self {
        Self::with_payload(
            id,
            x,
            y,
            width,
            height,
            Payload::Text(TextPayload {
                content: content.into(),
                font_size: DEFAULT_FONT_SIZE,
                font_family: DEFAULT_FONT_FAMILY.to_string(),
                fill: DEFAULT_FILL.to_string(),
            }),
        )
    }

    pub fn image(id: impl Into<String>, x: f64, y: f64, width: f64, height: f64, source: impl Into<String>) -> Self {
        Self::with_payload(id, x, y, width, height, Payload::Image(ImagePayload { source: source.into() }))
    }

    pub fn vector(
        id: impl Into<String>,
        x: f64,
        y: f64,
        width: f64,
        height: f64,
        data: impl Into<String>,
        z_hint: i64,
    ) -> Self {
        Self::with_payload(
            id,
            x,
            y,
            width,
            height,
            Payload::Vector(VectorPayload { data: data.into(), z_hint }),
        )
    }

    pub fn with_rotation(mut self, degrees: f64) -> Self {
        self.rotation = degrees;
        self
    }

    pub fn with_font_size(mut self, size: f64) -> Self {
        if let Payload::Text(t) = &mut self.payload {
            t.font_size = size;
        }
        self
    }

    pub fn kind(&self) -> ElementKind {
        self.payload.kind()
    }

    pub fn text_content(&self) -> Option<&str> {
        match &self.payload {
            Payload::Text(t) => Some(&t.content),
            _ => None,
        }
    }

    pub fn image_source(&self) -> Option<&str> {
        match &self.payload {
            Payload::Image(i) => Some(&i.source),
            _ => None,
        }
    }

    /// Vector elements are theme decoration, not content.
    pub fn is_embellishment(&self) -> bool {
        matches!(self.payload, Payload::Vector(_))
    }

    fn validate(&self) -> Result<(), CanvasError> {
        if self.id.is_empty() {
            return Err(CanvasError::Invalid("element id must be non-empty".into()));
        }
        let numbers = [
            ("x", self.x),
            ("y", self.y),
            ("width", self.width),
            ("height", self.height),
            ("rotation", self.rotation),
        ];
        for (name, v) in numbers {
            if !v.is_finite() {
                return Err(CanvasError::Invalid(format!("element `{}`: {name} is not finite", self.id)));
            }
        }
        if self.width < 0.0 || self.height < 0.0 {
            return Err(CanvasError::Invalid(format!("element `{}`: negative size", self.id)));
        }
        if let Payload::Text(t) = &self.payload {
            if !t.font_size.is_finite() || t.font_size < 0.0 {
                return Err(CanvasError::Invalid(format!("element `{}`: bad font size", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanvasDocument {
    width: u32,
    height: u32,
    schema_version: u32,
    elements: Vec<Element>,
    extra: BTreeMap<String, Value>,
}

impl CanvasDocument {
    /// Builds a validated document.
    pub fn new(width: u32, height: u32, elements: Vec<Element>) -> Result<Self, CanvasError> {
        Self::from_parts(width, height, CURRENT_SCHEMA_VERSION, elements, BTreeMap::new())
    }

    pub fn from_parts(
        width: u32,
        height: u32,
        schema_version: u32,
        elements: Vec<Element>,
        extra: BTreeMap<String, Value>,
    ) -> Result<Self, CanvasError> {
        let doc = CanvasDocument {
            width,
            height,
            schema_version,
            elements,
            extra,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn extra(&self) -> &BTreeMap<String, Value> {
        &self.extra
    }

    /// Same page and metadata, different element list.
    pub fn with_elements(&self, elements: Vec<Element>) -> Result<Self, CanvasError> {
        Self::from_parts(self.width, self.height, self.schema_version, elements, self.extra.clone())
    }

    pub fn find_element(&self, id: &str) -> Result<&Element, CanvasError> {
        self.elements
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| CanvasError::NotFound(id.to_string()))
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.id == id)
    }

    pub fn validate(&self) -> Result<(), CanvasError> {
        if self.width == 0 || self.height == 0 {
            return Err(CanvasError::Invalid("page width and height must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut dups: Vec<String> = Vec::new();
        for e in &self.elements {
            e.validate()?;
            if !seen.insert(e.id.as_str()) && !dups.contains(&e.id) {
                dups.push(e.id.clone());
            }
        }
        if !dups.is_empty() {
            dups.sort();
            return Err(CanvasError::DuplicateIds(dups));
        }
        Ok(())
    }
}

/// The canonical form as a JSON value, for embedding in larger payloads.
pub fn document_to_value(doc: &CanvasDocument) -> Value {
    serde_json::from_str(&serialize_document(doc)).expect("canonical form parses")
}

impl serde::Serialize for CanvasDocument {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        document_to_value(self).serialize(serializer)
    }
}

impl<'de> serde::Deserialize<'de> for CanvasDocument {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        document_from_value(&value).map_err(serde::de::Error::custom)
    }
}

/// Free-function form of [`CanvasDocument::find_element`].
pub fn find_element<'a>(doc: &'a CanvasDocument, id: &str) -> Result<&'a Element, CanvasError> {
    doc.find_element(id)
}

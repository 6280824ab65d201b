//! JSON wire format.
//!
//! ```text
//! { "width": int, "height": int, "schemaVersion": int, "children": [ child, ... ] }
//! child = { "id", "type": "text"|"image"|"svg", "x", "y", "width", "height", "rotation",
//!           text:  "text", "fontSize", "fontFamily", "fill"
//!           image: "src"
//!           svg:   "svgData", "zHint" }
//! ```
//!
//! The canonical form written by [`serialize_document`] is:
//!
//! - top-level keys `width`, `height`, `schemaVersion`, `children` in that
//!   order, followed by unknown top-level keys sorted by name;
//! - one child per line, known keys in the order listed above, then unknown
//!   keys sorted by name (nested objects also sorted);
//! - integral numbers below 1e15 in magnitude written without a fraction,
//!   everything else in shortest round-trip decimal form;
//! - two-space indentation and a trailing newline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};

use super::{
    CanvasDocument, CanvasError, Element, ImagePayload, Payload, TextPayload, VectorPayload, CURRENT_SCHEMA_VERSION,
    DEFAULT_FILL, DEFAULT_FONT_FAMILY, DEFAULT_FONT_SIZE,
};

const TEXT_KEYS: &[&str] = &["text", "fontSize", "fontFamily", "fill"];
const IMAGE_KEYS: &[&str] = &["src"];
const VECTOR_KEYS: &[&str] = &["svgData", "zHint"];
const COMMON_KEYS: &[&str] = &["id", "type", "x", "y", "width", "height", "rotation"];
const TOP_KEYS: &[&str] = &["width", "height", "schemaVersion", "children"];

pub fn parse_document(serialized: &str) -> Result<CanvasDocument, CanvasError> {
    let value: Value = serde_json::from_str(serialized).map_err(|e| CanvasError::Parse {
        offset: byte_offset(serialized, e.line(), e.column()),
        message: e.to_string(),
    })?;
    document_from_value(&value)
}

/// Converts an already-decoded JSON value (for example a field of an API
/// request body) into a document.
pub fn document_from_value(value: &Value) -> Result<CanvasDocument, CanvasError> {
    let top = value
        .as_object()
        .ok_or_else(|| invalid("top level must be an object"))?;
    let width = page_dimension(top, "width")?;
    let height = page_dimension(top, "height")?;
    let schema_version = match top.get("schemaVersion") {
        None => CURRENT_SCHEMA_VERSION,
        Some(v) => as_u32(v).ok_or_else(|| invalid("schemaVersion must be a non-negative integer"))?,
    };
    let children = top
        .get("children")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("`children` must be an array"))?;
    let elements = children
        .iter()
        .enumerate()
        .map(|(i, c)| element_from_value(i, c))
        .collect::<Result<Vec<_>, _>>()?;
    let extra = unknown_keys(top, TOP_KEYS);
    CanvasDocument::from_parts(width, height, schema_version, elements, extra)
}

fn element_from_value(index: usize, value: &Value) -> Result<Element, CanvasError> {
    let obj = value
        .as_object()
        .ok_or_else(|| invalid(&format!("children[{index}] is not an object")))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid(&format!("children[{index}] has no string `id`")))?
        .to_string();
    let ty = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| invalid(&format!("element `{id}` has no string `type`")))?;
    let num = |key: &str, default: Option<f64>| -> Result<f64, CanvasError> {
        match obj.get(key) {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| invalid(&format!("element `{id}`: `{key}` must be a number"))),
            None => default.ok_or_else(|| invalid(&format!("element `{id}`: missing `{key}`"))),
        }
    };
    let string = |key: &str, default: Option<&str>| -> Result<String, CanvasError> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(invalid(&format!("element `{id}`: `{key}` must be a string"))),
            None => default
                .map(str::to_string)
                .ok_or_else(|| invalid(&format!("element `{id}`: missing `{key}`"))),
        }
    };
    let (payload, kind_keys) = match ty {
        "text" => (
            Payload::Text(TextPayload {
                content: string("text", None)?,
                font_size: num("fontSize", Some(DEFAULT_FONT_SIZE))?,
                font_family: string("fontFamily", Some(DEFAULT_FONT_FAMILY))?,
                fill: string("fill", Some(DEFAULT_FILL))?,
            }),
            TEXT_KEYS,
        ),
        "image" => (Payload::Image(ImagePayload { source: string("src", None)? }), IMAGE_KEYS),
        "svg" => {
            let z_hint = match obj.get("zHint") {
                None => index as i64,
                Some(v) => v
                    .as_i64()
                    .ok_or_else(|| invalid(&format!("element `{id}`: `zHint` must be an integer")))?,
            };
            (
                Payload::Vector(VectorPayload {
                    data: string("svgData", None)?,
                    z_hint,
                }),
                VECTOR_KEYS,
            )
        }
        other => return Err(invalid(&format!("element `{id}`: unknown type `{other}`"))),
    };
    let mut known: Vec<&str> = COMMON_KEYS.to_vec();
    known.extend_from_slice(kind_keys);
    Ok(Element {
        x: num("x", Some(0.0))?,
        y: num("y", Some(0.0))?,
        width: num("width", None)?,
        height: num("height", None)?,
        rotation: num("rotation", Some(0.0))?,
        payload,
        extra: unknown_keys(obj, &known),
        id,
    })
}

pub fn serialize_document(doc: &CanvasDocument) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"width\": {},", doc.width());
    let _ = writeln!(out, "  \"height\": {},", doc.height());
    let _ = writeln!(out, "  \"schemaVersion\": {},", doc.schema_version());
    if doc.elements().is_empty() {
        out.push_str("  \"children\": []");
    } else {
        out.push_str("  \"children\": [\n");
        let n = doc.elements().len();
        for (i, e) in doc.elements().iter().enumerate() {
            out.push_str("    ");
            write_element(&mut out, e);
            out.push_str(if i + 1 < n { ",\n" } else { "\n" });
        }
        out.push_str("  ]");
    }
    for (k, v) in doc.extra() {
        let _ = write!(out, ",\n  {}: {}", json_string(k), canonical_value(v));
    }
    out.push_str("\n}\n");
    out
}

fn write_element(out: &mut String, e: &Element) {
    let mut fields: Vec<(&str, String)> = vec![
        ("id", json_string(&e.id)),
        ("type", json_string(e.kind().wire_name())),
        ("x", format_number(e.x)),
        ("y", format_number(e.y)),
        ("width", format_number(e.width)),
        ("height", format_number(e.height)),
        ("rotation", format_number(e.rotation)),
    ];
    match &e.payload {
        Payload::Text(t) => {
            fields.push(("text", json_string(&t.content)));
            fields.push(("fontSize", format_number(t.font_size)));
            fields.push(("fontFamily", json_string(&t.font_family)));
            fields.push(("fill", json_string(&t.fill)));
        }
        Payload::Image(i) => fields.push(("src", json_string(&i.source))),
        Payload::Vector(v) => {
            fields.push(("svgData", json_string(&v.data)));
            fields.push(("zHint", v.z_hint.to_string()));
        }
    }
    out.push('{');
    let mut first = true;
    let extras = e.extra.iter().map(|(k, v)| (k.as_str(), canonical_value(v)));
    for (k, v) in fields.into_iter().chain(extras) {
        if !first {
            out.push_str(", ");
        }
        first = false;
        let _ = write!(out, "{}: {}", json_string(k), v);
    }
    out.push('}');
}

/// Integral values below 1e15 print without a fraction; others use the
/// shortest decimal that parses back to the same `f64`.
pub(crate) fn format_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn canonical_value(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(v).expect("value serialization is infallible")
}

fn unknown_keys(obj: &Map<String, Value>, known: &[&str]) -> BTreeMap<String, Value> {
    obj.iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn page_dimension(top: &Map<String, Value>, key: &str) -> Result<u32, CanvasError> {
    let v = top.get(key).ok_or_else(|| invalid(&format!("missing page `{key}`")))?;
    match as_u32(v) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(invalid(&format!("page `{key}` must be a positive integer"))),
    }
}

fn as_u32(v: &Value) -> Option<u32> {
    if let Some(n) = v.as_u64() {
        return u32::try_from(n).ok();
    }
    let f = v.as_f64()?;
    if f >= 0.0 && f == f.trunc() && f <= u32::MAX as f64 {
        Some(f as u32)
    } else {
        None
    }
}

fn invalid(msg: &str) -> CanvasError {
    CanvasError::Invalid(msg.to_string())
}

/// serde_json reports 1-based line and column (column counted in bytes).
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

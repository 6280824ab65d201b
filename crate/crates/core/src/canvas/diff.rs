//! Structural diff of two documents in canonical JSON form.
//!
//! Works on the re-parsed canonical text rather than on the in-memory types,
//! so it can check edit operations without sharing their code path.

use serde_json::Value;

use super::{serialize_document, CanvasDocument};

/// Paths (`children[2].text`, `height`, ...) at which the canonical forms of
/// two documents differ. Children are compared by position; a length change
/// is reported as `children.length`.
pub fn structural_diff(before: &CanvasDocument, after: &CanvasDocument) -> Vec<String> {
    let a: Value = serde_json::from_str(&serialize_document(before)).expect("canonical form parses");
    let b: Value = serde_json::from_str(&serialize_document(after)).expect("canonical form parses");
    let mut out = Vec::new();
    diff_value("", &a, &b, &mut out);
    out
}

/// Diff over arbitrary JSON values, same path syntax.
pub fn diff_values(a: &Value, b: &Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_value("", a, b, &mut out);
    out
}

fn diff_value(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => diff_value(&p, x, y, out),
                    _ => out.push(p),
                }
            }
        }
        (Value::Array(xa), Value::Array(xb)) => {
            if xa.len() != xb.len() {
                out.push(format!("{path}.length"));
                return;
            }
            for (i, (x, y)) in xa.iter().zip(xb).enumerate() {
                diff_value(&format!("{path}[{i}]"), x, y, out);
            }
        }
        _ => {
            if a != b {
                out.push(path.to_string());
            }
        }
    }
}

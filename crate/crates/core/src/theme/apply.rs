//! Applying a template: strip its embellishments, map the poster's content
//! onto the template's slots, put the embellishments back at their depth,
//! then clear overlaps.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ThemeError;
use crate::canvas::{
    apply_adjustment, bounding_box, detect_overlaps, rasterize_with, total_overlap_area, Adjustment,
    CanvasDocument, CanvasError, Element, ElementKind, Payload, DEFAULT_MIN_OVERLAP_FRACTION,
};
use crate::gateway::{Gateway, ModelRequest, ResponseSchema};
use crate::prompt::{document_block, JSON_ONLY};

pub const TAG_MAP: &str = "theme.map";
pub const TAG_OVERLAP: &str = "theme.overlap";
pub const DEFAULT_OVERLAP_ROUNDS: u32 = 3;

/// Removes every vector element, returning each with its list position.
pub fn extract_embellishments(template: &CanvasDocument) -> (CanvasDocument, Vec<(Element, i64)>) {
    let mut kept = Vec::new();
    let mut taken = Vec::new();
    for (i, e) in template.elements().iter().enumerate() {
        if e.is_embellishment() {
            taken.push((e.clone(), i as i64));
        } else {
            kept.push(e.clone());
        }
    }
    let stripped = template.with_elements(kept).expect("subset of a valid document");
    (stripped, taken)
}

/// Inserts embellishments in ascending z-hint order, each at index
/// `min(z_hint, len)`. Ids that collide with existing elements get a
/// `-theme` suffix.
pub fn reinsert_embellishments(doc: &CanvasDocument, embellishments: &[(Element, i64)]) -> Result<CanvasDocument, CanvasError> {
    let mut elements = doc.elements().to_vec();
    let mut ids: BTreeSet<String> = elements.iter().map(|e| e.id.clone()).collect();
    let mut sorted: Vec<&(Element, i64)> = embellishments.iter().collect();
    sorted.sort_by_key(|(_, z)| *z);
    for (e, z) in sorted {
        let mut e = e.clone();
        if ids.contains(&e.id) {
            let base = format!("{}-theme", e.id);
            e.id = std::iter::once(base.clone())
                .chain((2..).map(|n| format!("{base}{n}")))
                .find(|c| !ids.contains(c))
                .expect("unbounded");
        }
        ids.insert(e.id.clone());
        let at = (*z).clamp(0, elements.len() as i64) as usize;
        elements.insert(at, e);
    }
    doc.with_elements(elements)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Content element id in the poster.
    pub original: String,
    /// Element id in the template.
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MappingReply {
    pub assignments: Vec<Assignment>,
}

impl ResponseSchema for MappingReply {
    const SCHEMA_ID: &'static str = TAG_MAP;

    fn check(&self) -> Result<(), String> {
        let mut o = BTreeSet::new();
        let mut s = BTreeSet::new();
        for a in &self.assignments {
            if !o.insert(&a.original) {
                return Err(format!("original `{}` assigned twice", a.original));
            }
            if !s.insert(&a.slot) {
                return Err(format!("slot `{}` assigned twice", a.slot));
            }
        }
        Ok(())
    }
}

fn content(doc: &CanvasDocument) -> impl Iterator<Item = &Element> {
    doc.elements().iter().filter(|e| !e.is_embellishment())
}

fn check_assignments(reply: &MappingReply, original: &CanvasDocument, template: &CanvasDocument) -> Result<(), String> {
    for a in &reply.assignments {
        let o = original
            .find_element(&a.original)
            .map_err(|_| format!("unknown original element `{}`", a.original))?;
        let s = template.find_element(&a.slot).map_err(|_| format!("unknown template slot `{}`", a.slot))?;
        if o.is_embellishment() || s.is_embellishment() {
            return Err(format!("`{}` → `{}`: decorations cannot be mapped", a.original, a.slot));
        }
        if o.kind() != s.kind() {
            return Err(format!("`{}` is {} but slot `{}` is {}", a.original, o.kind(), a.slot, s.kind()));
        }
    }
    Ok(())
}

/// Pairs content with slots of the same kind in reading order (top to
/// bottom, then left to right).
fn heuristic_assignments(original: &CanvasDocument, template: &CanvasDocument) -> Vec<Assignment> {
    let reading = |doc: &CanvasDocument, kind: ElementKind| -> Vec<String> {
        let mut v: Vec<(usize, &Element)> = content(doc).enumerate().filter(|(_, e)| e.kind() == kind).collect();
        v.sort_by(|(i, a), (j, b)| {
            let (ra, rb) = (bounding_box(a), bounding_box(b));
            ra.y.total_cmp(&rb.y).then(ra.x.total_cmp(&rb.x)).then(i.cmp(j))
        });
        v.into_iter().map(|(_, e)| e.id.clone()).collect()
    };
    let mut out = Vec::new();
    for kind in [ElementKind::Text, ElementKind::Image] {
        for (o, s) in reading(original, kind).into_iter().zip(reading(template, kind)) {
            out.push(Assignment { original: o, slot: s });
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn middle_string(mut v: Vec<String>) -> Option<String> {
    v.sort();
    let n = v.len();
    (n > 0).then(|| v[(n - 1) / 2].clone())
}

struct Scale {
    sx: f64,
    sy: f64,
}

impl Scale {
    fn apply(&self, e: &mut Element) {
        e.x *= self.sx;
        e.y *= self.sy;
        e.width *= self.sx;
        e.height *= self.sy;
        if let Payload::Text(t) = &mut e.payload {
            t.font_size *= self.sx.min(self.sy);
        }
    }
}

/// Moves the poster's text and image content into the template's layout.
///
/// Mapped slots keep the template's geometry and styling but take the
/// original's id and content. Unused template slots are dropped. Content
/// with no slot is kept at its own position with the template's median text
/// styling. Template geometry is scaled to the poster's page size.
/// Embellishments on either side are not carried over.
pub fn map_components(gw: &Gateway, original: &CanvasDocument, template: &CanvasDocument) -> Result<CanvasDocument, ThemeError> {
    let assignments = if gw.heuristics() {
        heuristic_assignments(original, template)
    } else {
        let req = ModelRequest::new(TAG_MAP, MappingReply::SCHEMA_ID)
            .system(format!(
                "You restyle a poster with a theme template. Assign each text and image element of the poster to \
                 the template slot of the same kind that best fits its role (headline, body, call to action, main \
                 image). Each slot takes at most one element; leave elements unassigned when no slot fits.\n{JSON_ONLY}\n\
                 Shape: {{\"assignments\": [{{\"original\": poster element id, \"slot\": template element id}}]}}"
            ))
            .text(format!("Poster:\n{}", document_block(original)))
            .text(format!("Template:\n{}", document_block(template)))
            .temperature(0.2);
        let check = |r: &MappingReply| check_assignments(r, original, template);
        gw.complete::<MappingReply>(&req, &check)?.0.assignments
    };
    build_mapped(original, template, &assignments)
}

fn build_mapped(original: &CanvasDocument, template: &CanvasDocument, assignments: &[Assignment]) -> Result<CanvasDocument, ThemeError> {
    let scale = Scale {
        sx: original.width() as f64 / template.width() as f64,
        sy: original.height() as f64 / template.height() as f64,
    };
    let by_slot: BTreeMap<&str, &str> = assignments.iter().map(|a| (a.slot.as_str(), a.original.as_str())).collect();
    let mapped: BTreeSet<&str> = assignments.iter().map(|a| a.original.as_str()).collect();
    let mut out = Vec::new();
    for slot in content(template) {
        let Some(orig_id) = by_slot.get(slot.id.as_str()) else {
            continue;
        };
        let orig = original.find_element(orig_id)?;
        let mut e = slot.clone();
        scale.apply(&mut e);
        e.id = orig.id.clone();
        match (&mut e.payload, &orig.payload) {
            (Payload::Text(t), Payload::Text(o)) => t.content = o.content.clone(),
            (Payload::Image(i), Payload::Image(o)) => i.source = o.source.clone(),
            _ => {
                return Err(CanvasError::KindMismatch {
                    id: orig.id.clone(),
                    expected: orig.kind(),
                    actual: e.kind(),
                }
                .into())
            }
        }
        out.push(e);
    }
    let texts: Vec<_> = content(template)
        .filter_map(|e| match &e.payload {
            Payload::Text(t) => Some(t),
            _ => None,
        })
        .collect();
    let font_size = median(texts.iter().map(|t| t.font_size).collect()).map(|f| f * scale.sx.min(scale.sy));
    let family = middle_string(texts.iter().map(|t| t.font_family.clone()).collect());
    let fill = middle_string(texts.iter().map(|t| t.fill.clone()).collect());
    for e in content(original).filter(|e| !mapped.contains(e.id.as_str())) {
        let mut e = e.clone();
        if let Payload::Text(t) = &mut e.payload {
            if let (Some(s), Some(f), Some(c)) = (font_size, &family, &fill) {
                t.font_size = s;
                t.font_family = f.clone();
                t.fill = c.clone();
            }
        }
        out.push(e);
    }
    Ok(CanvasDocument::from_parts(
        original.width(),
        original.height(),
        original.schema_version(),
        out,
        template.extra().clone(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct OverlapReply {
    pub adjustments: Vec<Adjustment>,
}

impl ResponseSchema for OverlapReply {
    const SCHEMA_ID: &'static str = TAG_OVERLAP;

    fn check(&self) -> Result<(), String> {
        for a in &self.adjustments {
            a.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapOutcome {
    pub document: CanvasDocument,
    pub adjustments: Vec<Adjustment>,
    pub rounds: u32,
    /// False when `max_rounds` ran out before the layout settled.
    pub complete: bool,
}

/// Iteratively repositions or resizes elements until nothing overlaps or
/// `max_rounds` is reached. In heuristic mode each overlapping pair is
/// pushed apart by moving the later element right or down by the overlap
/// extent; a move is kept only if total overlap area does not grow.
pub fn resolve_overlaps(gw: &Gateway, doc: &CanvasDocument, max_rounds: u32) -> Result<OverlapOutcome, ThemeError> {
    let max_rounds = max_rounds.max(1);
    if gw.heuristics() {
        return Ok(push_apart(doc, max_rounds));
    }
    let mut current = doc.clone();
    let mut applied = Vec::new();
    for round in 1..=max_rounds {
        let mut req = ModelRequest::new(TAG_OVERLAP, OverlapReply::SCHEMA_ID)
            .system(format!(
                "You check a poster layout for visual overlap between text and image elements. If repositioning \
                 (new x/y) or resizing (new width, height or font size) is needed, list the adjustments with a \
                 one-line note each; return an empty list when the layout is fine.\n{JSON_ONLY}\n\
                 Shape: {{\"adjustments\": [{{\"element_id\": str, \"kind\": \"reposition\"|\"resize\", \"new_x\"?, \"new_y\"?, \
                 \"new_width\"?, \"new_height\"?, \"new_font_size\"?: number, \"note\": str}}]}}"
            ))
            .text(document_block(&current))
            .temperature(0.1);
        if let Ok(img) = rasterize_with(&current, gw.assets()) {
            req = req.image(Arc::new(img));
        }
        let snapshot = current.clone();
        let check = move |r: &OverlapReply| -> Result<(), String> {
            let mut d = snapshot.clone();
            for a in &r.adjustments {
                d = apply_adjustment(&d, a).map_err(|e| e.to_string())?;
            }
            Ok(())
        };
        let reply = gw.complete::<OverlapReply>(&req, &check)?.0;
        if reply.adjustments.is_empty() {
            return Ok(OverlapOutcome {
                document: current,
                adjustments: applied,
                rounds: round,
                complete: true,
            });
        }
        for a in reply.adjustments {
            current = apply_adjustment(&current, &a)?;
            applied.push(a);
        }
    }
    Ok(OverlapOutcome {
        document: current,
        adjustments: applied,
        rounds: max_rounds,
        complete: false,
    })
}

fn push_apart(doc: &CanvasDocument, max_rounds: u32) -> OverlapOutcome {
    let mut current = doc.clone();
    let mut applied = Vec::new();
    for round in 1..=max_rounds {
        let overlaps = detect_overlaps(&current, DEFAULT_MIN_OVERLAP_FRACTION);
        if overlaps.is_empty() {
            return OverlapOutcome {
                document: current,
                adjustments: applied,
                rounds: round,
                complete: true,
            };
        }
        for ov in overlaps {
            let (Some(ia), Some(ib)) = (current.position_of(&ov.a), current.position_of(&ov.b)) else {
                continue;
            };
            let (lo, hi) = if ia < ib { (ia, ib) } else { (ib, ia) };
            let below = &current.elements()[lo];
            let above = &current.elements()[hi];
            let (ra, rb) = (bounding_box(below), bounding_box(above));
            if ra.intersection_area(&rb) == 0.0 {
                continue;
            }
            let dx = ra.right() - rb.x;
            let dy = ra.bottom() - rb.y;
            let mut candidates = vec![
                (dx, Adjustment::reposition(&above.id, above.x + dx, above.y, format!("move {} right by {dx} px to clear {}", above.id, below.id))),
                (dy, Adjustment::reposition(&above.id, above.x, above.y + dy, format!("move {} down by {dy} px to clear {}", above.id, below.id))),
            ];
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
            let before = total_overlap_area(&current);
            let mut best: Option<(f64, CanvasDocument, Adjustment)> = None;
            for (_, adj) in candidates {
                let Ok(next) = apply_adjustment(&current, &adj) else { continue };
                let after = total_overlap_area(&next);
                if after <= before && best.as_ref().is_none_or(|(b, _, _)| after < *b) {
                    best = Some((after, next, adj));
                }
            }
            if let Some((_, next, adj)) = best {
                current = next;
                applied.push(adj);
            }
        }
    }
    let complete = detect_overlaps(&current, DEFAULT_MIN_OVERLAP_FRACTION).is_empty();
    OverlapOutcome {
        document: current,
        adjustments: applied,
        rounds: max_rounds,
        complete,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeOutcome {
    pub document: CanvasDocument,
    pub adjustments: Vec<Adjustment>,
    pub rounds: u32,
    pub complete: bool,
}

/// Full theme application. Pure: on any error the caller's document is
/// untouched and nothing partial is returned.
pub fn apply_theme(gw: &Gateway, doc: &CanvasDocument, template: &CanvasDocument, max_rounds: u32) -> Result<ThemeOutcome, ThemeError> {
    let (stripped, embellishments) = extract_embellishments(template);
    let mapped = map_components(gw, doc, &stripped)?;
    let scale = Scale {
        sx: doc.width() as f64 / template.width() as f64,
        sy: doc.height() as f64 / template.height() as f64,
    };
    let scaled: Vec<(Element, i64)> = embellishments
        .into_iter()
        .map(|(mut e, z)| {
            scale.apply(&mut e);
            (e, z)
        })
        .collect();
    let decorated = reinsert_embellishments(&mapped, &scaled)?;
    let resolved = resolve_overlaps(gw, &decorated, max_rounds)?;
    Ok(ThemeOutcome {
        document: resolved.document,
        adjustments: resolved.adjustments,
        rounds: resolved.rounds,
        complete: resolved.complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{AssetStore, GatewayConfig, ScriptedBackend};
    use serde_json::json;

    fn doc(elements: Vec<Element>) -> CanvasDocument {
        CanvasDocument::new(400, 600, elements).unwrap()
    }

    #[test]
    fn embellishment_positions() {
        let t = doc(vec![
            Element::vector("v0", 0.0, 0.0, 10.0, 10.0, "<svg/>", 0),
            Element::text("t1", 0.0, 0.0, 10.0, 10.0, "a"),
            Element::image("i2", 0.0, 0.0, 10.0, 10.0, "x.png"),
            Element::vector("v3", 0.0, 0.0, 10.0, 10.0, "<svg/>", 0),
        ]);
        let (stripped, emb) = extract_embellishments(&t);
        assert_eq!(emb.iter().map(|(_, z)| *z).collect::<Vec<_>>(), [0, 3]);
        assert_eq!(stripped.elements().len(), 2);
        assert_eq!(reinsert_embellishments(&stripped, &emb).unwrap(), t);
    }

    #[test]
    fn no_vectors_is_identity() {
        let t = doc(vec![Element::text("t", 0.0, 0.0, 1.0, 1.0, "a")]);
        let (s, e) = extract_embellishments(&t);
        assert_eq!(s, t);
        assert!(e.is_empty());
    }

    #[test]
    fn colliding_embellishment_renamed() {
        let d = doc(vec![Element::text("v", 0.0, 0.0, 1.0, 1.0, "a")]);
        let out = reinsert_embellishments(&d, &[(Element::vector("v", 0.0, 0.0, 1.0, 1.0, "<svg/>", 0), 0)]).unwrap();
        assert_eq!(out.elements()[0].id, "v-theme");
    }

    #[test]
    fn heuristic_mapping_takes_template_layout() {
        let original = doc(vec![
            Element::text("head", 10.0, 10.0, 100.0, 40.0, "Big Sale"),
            Element::text("body", 10.0, 60.0, 100.0, 40.0, "All week"),
            Element::image("pic", 10.0, 120.0, 100.0, 100.0, "coffee.png"),
        ]);
        let template = doc(vec![
            Element::image("slot-img", 0.0, 0.0, 400.0, 300.0, "template.png"),
            Element::text("slot-a", 20.0, 320.0, 360.0, 60.0, "Headline").with_font_size(48.0),
            Element::text("slot-b", 20.0, 400.0, 360.0, 40.0, "Body"),
            Element::text("slot-c", 20.0, 460.0, 360.0, 40.0, "Extra"),
        ]);
        let out = map_components(&Gateway::fallback(), &original, &template).unwrap();
        let ids: Vec<_> = out.elements().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["pic", "head", "body"]);
        let head = out.find_element("head").unwrap();
        assert_eq!((head.x, head.y), (20.0, 320.0));
        assert_eq!(head.text_content(), Some("Big Sale"));
        assert_eq!(out.find_element("pic").unwrap().image_source(), Some("coffee.png"));
    }

    #[test]
    fn unmatched_original_gets_median_style() {
        let original = doc(vec![
            Element::text("a", 0.0, 0.0, 10.0, 10.0, "one"),
            Element::text("b", 0.0, 20.0, 10.0, 10.0, "two"),
        ]);
        let template = doc(vec![Element::text("s", 5.0, 5.0, 50.0, 20.0, "slot").with_font_size(40.0)]);
        let out = map_components(&Gateway::fallback(), &original, &template).unwrap();
        let b = out.find_element("b").unwrap();
        assert_eq!((b.x, b.y), (0.0, 20.0));
        match &b.payload {
            Payload::Text(t) => assert_eq!(t.font_size, 40.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn scripted_mapping_rejects_unknown_ids() {
        let original = doc(vec![Element::text("a", 0.0, 0.0, 10.0, 10.0, "one")]);
        let template = doc(vec![Element::text("s", 5.0, 5.0, 50.0, 20.0, "slot")]);
        let bad = json!({"assignments": [{"original": "zzz", "slot": "s"}]});
        let mut b = ScriptedBackend::in_memory();
        for _ in 0..3 {
            b = b.with_chat(TAG_MAP, bad.clone());
        }
        let gw = Gateway::new(Arc::new(b), AssetStore::in_memory(), GatewayConfig::default());
        let err = map_components(&gw, &original, &template).unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn push_apart_clears_identical_boxes() {
        let d = doc(vec![
            Element::text("a", 10.0, 10.0, 100.0, 50.0, "x"),
            Element::text("b", 10.0, 10.0, 100.0, 50.0, "y"),
        ]);
        let out = resolve_overlaps(&Gateway::fallback(), &d, 3).unwrap();
        assert!(detect_overlaps(&out.document, DEFAULT_MIN_OVERLAP_FRACTION).is_empty());
        assert_eq!(out.adjustments.len(), 1);
        assert_eq!(out.adjustments[0].element_id, "b");
        assert!(out.complete);
    }

    #[test]
    fn push_apart_noop_without_overlaps() {
        let d = doc(vec![Element::text("a", 0.0, 0.0, 10.0, 10.0, "x"), Element::text("b", 50.0, 50.0, 10.0, 10.0, "y")]);
        let out = resolve_overlaps(&Gateway::fallback(), &d, 3).unwrap();
        assert_eq!(out.document, d);
        assert!(out.adjustments.is_empty());
        assert_eq!(out.rounds, 1);
    }

    #[test]
    fn scripted_overlap_loop() {
        let d = doc(vec![
            Element::text("a", 10.0, 10.0, 100.0, 50.0, "x"),
            Element::text("b", 10.0, 10.0, 100.0, 50.0, "y"),
        ]);
        let b = ScriptedBackend::in_memory()
            .with_chat(TAG_OVERLAP, json!({"adjustments": [{"element_id": "b", "kind": "reposition", "new_y": 80, "note": "move b below a"}]}))
            .with_chat(TAG_OVERLAP, json!({"adjustments": []}));
        let gw = Gateway::new(Arc::new(b), AssetStore::in_memory(), GatewayConfig::default());
        let out = resolve_overlaps(&gw, &d, 3).unwrap();
        assert_eq!(out.rounds, 2);
        assert_eq!(out.adjustments.len(), 1);
        assert_eq!(out.document.find_element("b").unwrap().y, 80.0);
        assert!(out.complete);
    }

    #[test]
    fn fixed_point_on_own_template() {
        let d = doc(vec![
            Element::text("h", 20.0, 20.0, 300.0, 60.0, "Hello"),
            Element::image("i", 20.0, 100.0, 300.0, 300.0, "a.png"),
        ]);
        let out = apply_theme(&Gateway::fallback(), &d, &d, 3).unwrap();
        assert_eq!(out.document, d);
    }
}

//! Pure single-element edits. Each returns a new document and leaves the
//! input untouched.

use serde::{Deserialize, Serialize};

use super::{CanvasDocument, CanvasError, Element, ElementKind, Payload};

pub fn set_text(doc: &CanvasDocument, id: &str, content: &str) -> Result<CanvasDocument, CanvasError> {
    edit_element(doc, id, |e| match &mut e.payload {
        Payload::Text(t) => {
            t.content = content.to_string();
            Ok(())
        }
        other => Err(mismatch(id, ElementKind::Text, other.kind())),
    })
}

pub fn set_image_source(doc: &CanvasDocument, id: &str, source: &str) -> Result<CanvasDocument, CanvasError> {
    edit_element(doc, id, |e| match &mut e.payload {
        Payload::Image(i) => {
            i.source = source.to_string();
            Ok(())
        }
        other => Err(mismatch(id, ElementKind::Image, other.kind())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentKind {
    Reposition,
    Resize,
}

/// A layout change to one element. Repositions carry only coordinates;
/// resizes carry only size fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub element_id: String,
    pub kind: AdjustmentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_font_size: Option<f64>,
    #[serde(default)]
    pub note: String,
}

impl Adjustment {
    pub fn reposition(id: impl Into<String>, x: f64, y: f64, note: impl Into<String>) -> Self {
        Adjustment {
            element_id: id.into(),
            kind: AdjustmentKind::Reposition,
            new_x: Some(x),
            new_y: Some(y),
            new_width: None,
            new_height: None,
            new_font_size: None,
            note: note.into(),
        }
    }

    pub fn resize(id: impl Into<String>, width: Option<f64>, height: Option<f64>, font_size: Option<f64>) -> Self {
        Adjustment {
            element_id: id.into(),
            kind: AdjustmentKind::Resize,
            new_x: None,
            new_y: None,
            new_width: width,
            new_height: height,
            new_font_size: font_size,
            note: String::new(),
        }
    }

    /// Checks field consistency against `kind`, independent of any document.
    pub fn validate(&self) -> Result<(), CanvasError> {
        let bad = |reason: &str| CanvasError::InvalidAdjustment {
            id: self.element_id.clone(),
            reason: reason.to_string(),
        };
        let coords = [self.new_x, self.new_y];
        let sizes = [self.new_width, self.new_height, self.new_font_size];
        if coords.iter().chain(sizes.iter()).flatten().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        match self.kind {
            AdjustmentKind::Reposition => {
                if sizes.iter().any(Option::is_some) {
                    return Err(bad("reposition may only carry new_x/new_y"));
                }
                if coords.iter().all(Option::is_none) {
                    return Err(bad("reposition needs new_x or new_y"));
                }
            }
            AdjustmentKind::Resize => {
                if coords.iter().any(Option::is_some) {
                    return Err(bad("resize may not carry new_x/new_y"));
                }
                if sizes.iter().all(Option::is_none) {
                    return Err(bad("resize needs new_width, new_height or new_font_size"));
                }
                if sizes.iter().flatten().any(|v| *v < 0.0) {
                    return Err(bad("negative size"));
                }
            }
        }
        Ok(())
    }
}

pub fn apply_adjustment(doc: &CanvasDocument, adj: &Adjustment) -> Result<CanvasDocument, CanvasError> {
    doc.find_element(&adj.element_id)?;
    adj.validate()?;
    edit_element(doc, &adj.element_id, |e| {
        if let Some(x) = adj.new_x {
            e.x = x;
        }
        if let Some(y) = adj.new_y {
            e.y = y;
        }
        if let Some(w) = adj.new_width {
            e.width = w;
        }
        if let Some(h) = adj.new_height {
            e.height = h;
        }
        if let Some(size) = adj.new_font_size {
            match &mut e.payload {
                Payload::Text(t) => t.font_size = size,
                _ => {
                    return Err(CanvasError::InvalidAdjustment {
                        id: adj.element_id.clone(),
                        reason: "font size on a non-text element".into(),
                    })
                }
            }
        }
        Ok(())
    })
}

fn edit_element(
    doc: &CanvasDocument,
    id: &str,
    f: impl FnOnce(&mut Element) -> Result<(), CanvasError>,
) -> Result<CanvasDocument, CanvasError> {
    let index = doc.position_of(id).ok_or_else(|| CanvasError::NotFound(id.to_string()))?;
    let mut elements = doc.elements().to_vec();
    f(&mut elements[index])?;
    doc.with_elements(elements)
}

fn mismatch(id: &str, expected: ElementKind, actual: ElementKind) -> CanvasError {
    CanvasError::KindMismatch {
        id: id.to_string(),
        expected,
        actual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> CanvasDocument {
        CanvasDocument::new(
            300,
            300,
            vec![
                Element::text("t1", 10.0, 10.0, 100.0, 30.0, "Hello"),
                Element::image("img1", 0.0, 50.0, 100.0, 100.0, "old.png"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn set_text_to_current_is_noop() {
        let d = doc();
        assert_eq!(set_text(&d, "t1", "Hello").unwrap(), d);
    }

    #[test]
    fn set_text_on_image_is_kind_mismatch() {
        let err = set_text(&doc(), "img1", "x").unwrap_err();
        assert!(matches!(err, CanvasError::KindMismatch { ref id, .. } if id == "img1"));
    }

    #[test]
    fn set_text_leaves_input_alone() {
        let d = doc();
        let out = set_text(&d, "t1", "Hi").unwrap();
        assert_eq!(d.elements()[0].text_content(), Some("Hello"));
        assert_eq!(out.elements()[0].text_content(), Some("Hi"));
    }

    #[test]
    fn set_source_checks() {
        let d = doc();
        assert_eq!(set_image_source(&d, "img1", "old.png").unwrap(), d);
        assert!(matches!(set_image_source(&d, "t1", "x"), Err(CanvasError::KindMismatch { .. })));
        assert_eq!(set_image_source(&d, "nope", "x"), Err(CanvasError::NotFound("nope".into())));
    }

    #[test]
    fn reposition_to_same_place_is_noop() {
        let d = doc();
        assert_eq!(apply_adjustment(&d, &Adjustment::reposition("t1", 10.0, 10.0, "")).unwrap(), d);
    }

    #[test]
    fn reposition_with_width_rejected() {
        let mut adj = Adjustment::reposition("t1", 1.0, 1.0, "");
        adj.new_width = Some(5.0);
        assert!(matches!(apply_adjustment(&doc(), &adj), Err(CanvasError::InvalidAdjustment { .. })));
    }

    #[test]
    fn empty_resize_rejected() {
        let adj = Adjustment::resize("t1", None, None, None);
        assert!(adj.validate().is_err());
    }

    #[test]
    fn font_size_only_for_text() {
        let adj = Adjustment::resize("img1", None, None, Some(12.0));
        assert!(apply_adjustment(&doc(), &adj).is_err());
        let adj = Adjustment::resize("t1", None, None, Some(12.0));
        let out = apply_adjustment(&doc(), &adj).unwrap();
        assert!(matches!(&out.elements()[0].payload, Payload::Text(t) if t.font_size == 12.0));
    }

    #[test]
    fn unknown_element() {
        let adj = Adjustment::resize("zz", Some(1.0), None, None);
        assert_eq!(apply_adjustment(&doc(), &adj), Err(CanvasError::NotFound("zz".into())));
    }
}

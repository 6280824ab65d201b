use serde::{Deserialize, Serialize};

use super::{CanvasDocument, Element};

/// Overlaps smaller than this fraction of the smaller box are ignored.
pub const DEFAULT_MIN_OVERLAP_FRACTION: f64 = 0.02;

/// Axis-aligned rectangle, top-left origin, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Rect { x, y, width, height }
    }

    pub fn right(&self) -> f64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        self.intersection(other).map_or(0.0, |r| r.area())
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.right() && py >= self.y && py <= self.bottom()
    }
}

/// Sine and cosine with exact values at multiples of 90°.
pub(crate) fn sin_cos_degrees(degrees: f64) -> (f64, f64) {
    let d = degrees.rem_euclid(360.0);
    if d == 0.0 {
        (0.0, 1.0)
    } else if d == 90.0 {
        (1.0, 0.0)
    } else if d == 180.0 {
        (0.0, -1.0)
    } else if d == 270.0 {
        (-1.0, 0.0)
    } else {
        d.to_radians().sin_cos()
    }
}

/// Axis-aligned box of the element after rotating it about its center.
pub fn bounding_box(e: &Element) -> Rect {
    let (sin, cos) = sin_cos_degrees(e.rotation);
    if sin == 0.0 {
        return Rect::new(e.x, e.y, e.width, e.height);
    }
    let w = e.width * cos.abs() + e.height * sin.abs();
    let h = e.width * sin.abs() + e.height * cos.abs();
    let cx = e.x + e.width / 2.0;
    let cy = e.y + e.height / 2.0;
    Rect::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: String,
    pub b: String,
    /// Intersection area of the two bounding boxes, px².
    pub area: f64,
}

/// Unordered element pairs whose bounding boxes intersect by more than
/// `min_fraction` of the smaller box. Embellishments are skipped. Each pair
/// is reported with `a < b` and the list is sorted by `(a, b)`.
pub fn detect_overlaps(doc: &CanvasDocument, min_fraction: f64) -> Vec<Overlap> {
    let boxes = content_boxes(doc);
    let mut out = Vec::new();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (ea, ra) = boxes[i];
            let (eb, rb) = boxes[j];
            let area = ra.intersection_area(&rb);
            if area > min_fraction * ra.area().min(rb.area()) {
                let (a, b) = if ea.id < eb.id { (ea, eb) } else { (eb, ea) };
                out.push(Overlap {
                    a: a.id.clone(),
                    b: b.id.clone(),
                    area,
                });
            }
        }
    }
    out.sort_by(|p, q| (&p.a, &p.b).cmp(&(&q.a, &q.b)));
    out
}

/// Sum of pairwise bounding-box intersection areas over content elements,
/// with no threshold.
pub fn total_overlap_area(doc: &CanvasDocument) -> f64 {
    let boxes = content_boxes(doc);
    let mut total = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            total += boxes[i].1.intersection_area(&boxes[j].1);
        }
    }
    total
}

fn content_boxes(doc: &CanvasDocument) -> Vec<(&Element, Rect)> {
    doc.elements()
        .iter()
        .filter(|e| !e.is_embellishment())
        .map(|e| (e, bounding_box(e)))
        .collect()
}

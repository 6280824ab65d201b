//! Box-level rendering of a document into an RGB buffer.
//!
//! Text is drawn as a tinted box with solid bars standing in for lines of
//! glyphs, images are scaled from resolvable assets (gray placeholders
//! otherwise), and vectors are outlined. Pixels are sampled at their centers
//! against each element's rotated rectangle, so the output depends only on
//! the document and the asset resolver.

use image::{Rgb, RgbImage};

use super::geometry::{bounding_box, sin_cos_degrees};
use super::{CanvasDocument, CanvasError, Element, Payload, MAX_PAGE_SIDE};

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const PLACEHOLDER: Rgb<u8> = Rgb([180, 180, 180]);
const OUTLINE: Rgb<u8> = Rgb([90, 90, 90]);

pub trait AssetResolver {
    fn resolve(&self, reference: &str) -> Option<RgbImage>;
}

/// Resolves nothing; every image becomes a placeholder.
pub struct NoAssets;

impl AssetResolver for NoAssets {
    fn resolve(&self, _: &str) -> Option<RgbImage> {
        None
    }
}

pub fn rasterize(doc: &CanvasDocument) -> Result<RgbImage, CanvasError> {
    rasterize_with(doc, &NoAssets)
}

pub fn rasterize_with(doc: &CanvasDocument, assets: &dyn AssetResolver) -> Result<RgbImage, CanvasError> {
    let (w, h) = (doc.width(), doc.height());
    if w == 0 || h == 0 || w > MAX_PAGE_SIDE || h > MAX_PAGE_SIDE {
        return Err(CanvasError::Invalid(format!("cannot render a {w}x{h} page")));
    }
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    for e in doc.elements() {
        draw_element(&mut img, e, assets);
    }
    Ok(img)
}

fn draw_element(img: &mut RgbImage, e: &Element, assets: &dyn AssetResolver) {
    if e.width <= 0.0 || e.height <= 0.0 {
        return;
    }
    let source = match &e.payload {
        Payload::Image(i) => assets.resolve(&i.source),
        _ => None,
    };
    let bbox = bounding_box(e);
    let (sin, cos) = sin_cos_degrees(e.rotation);
    let (cx, cy) = (e.x + e.width / 2.0, e.y + e.height / 2.0);
    let px0 = bbox.x.floor().max(0.0) as u32;
    let py0 = bbox.y.floor().max(0.0) as u32;
    let px1 = (bbox.right().ceil().max(0.0) as u32).min(img.width());
    let py1 = (bbox.bottom().ceil().max(0.0) as u32).min(img.height());
    for py in py0..py1 {
        for px in px0..px1 {
            let (sx, sy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
            // inverse rotation into the element frame
            let lx = sx * cos + sy * sin + e.width / 2.0;
            let ly = -sx * sin + sy * cos + e.height / 2.0;
            if lx < 0.0 || ly < 0.0 || lx >= e.width || ly >= e.height {
                continue;
            }
            let color = match &e.payload {
                Payload::Text(t) => text_pixel(lx, ly, e.width, &t.content, t.font_size, &t.fill),
                Payload::Image(_) => match &source {
                    Some(src) => sample(src, lx / e.width, ly / e.height),
                    None => Some(PLACEHOLDER),
                },
                Payload::Vector(_) => {
                    let edge = lx < 1.0 || ly < 1.0 || lx >= e.width - 1.0 || ly >= e.height - 1.0;
                    edge.then_some(OUTLINE)
                }
            };
            if let Some(c) = color {
                img.put_pixel(px, py, c);
            }
        }
    }
}

fn text_pixel(lx: f64, ly: f64, box_width: f64, content: &str, font_size: f64, fill: &str) -> Option<Rgb<u8>> {
    let ink = parse_color(fill).unwrap_or(Rgb([0, 0, 0]));
    let size = font_size.max(1.0);
    let line_pitch = size * 1.2;
    let bar = (size * 0.6).max(1.0);
    let chars = content.chars().count() as f64;
    let line_len = (chars * size * 0.5).min(box_width);
    let lines = if line_len > 0.0 {
        (chars * size * 0.5 / box_width).ceil().max(1.0)
    } else {
        0.0
    };
    let line = (ly / line_pitch).floor();
    if line < lines && (ly - line * line_pitch) < bar && lx < line_len {
        return Some(ink);
    }
    Some(tint(ink))
}

fn tint(ink: Rgb<u8>) -> Rgb<u8> {
    let mix = |c: u8, b: u8| ((c as u16 + 4 * b as u16) / 5) as u8;
    let t = Rgb([mix(ink[0], BACKGROUND[0]), mix(ink[1], BACKGROUND[1]), mix(ink[2], BACKGROUND[2])]);
    if t == BACKGROUND {
        Rgb([t[0] - 8, t[1] - 8, t[2] - 8])
    } else {
        t
    }
}

fn sample(src: &RgbImage, u: f64, v: f64) -> Option<Rgb<u8>> {
    if src.width() == 0 || src.height() == 0 {
        return Some(PLACEHOLDER);
    }
    let x = ((u * src.width() as f64) as u32).min(src.width() - 1);
    let y = ((v * src.height() as f64) as u32).min(src.height() - 1);
    Some(*src.get_pixel(x, y))
}

/// Accepts `#rgb`, `#rrggbb`, `rgb(r,g,b)`, `rgba(r,g,b,a)` and a few names.
pub fn parse_color(s: &str) -> Option<Rgb<u8>> {
    let s = s.trim().to_ascii_lowercase();
    if let Some(hex) = s.strip_prefix('#') {
        let digits: Vec<u8> = hex.chars().map(|c| c.to_digit(16).map(|d| d as u8)).collect::<Option<_>>()?;
        return match digits.len() {
            3 => Some(Rgb([digits[0] * 17, digits[1] * 17, digits[2] * 17])),
            6 | 8 => Some(Rgb([
                digits[0] * 16 + digits[1],
                digits[2] * 16 + digits[3],
                digits[4] * 16 + digits[5],
            ])),
            _ => None,
        };
    }
    if let Some(inner) = s.strip_prefix("rgba(").or_else(|| s.strip_prefix("rgb(")) {
        let parts: Vec<u8> = inner
            .trim_end_matches(')')
            .split(',')
            .take(3)
            .map(|p| p.trim().parse::<f64>().ok().map(|v| v.clamp(0.0, 255.0) as u8))
            .collect::<Option<_>>()?;
        return (parts.len() == 3).then(|| Rgb([parts[0], parts[1], parts[2]]));
    }
    let named = match s.as_str() {
        "black" => [0, 0, 0],
        "white" => [255, 255, 255],
        "red" => [255, 0, 0],
        "green" => [0, 128, 0],
        "blue" => [0, 0, 255],
        "gray" | "grey" => [128, 128, 128],
        "orange" => [255, 165, 0],
        "yellow" => [255, 255, 0],
        "brown" => [165, 42, 42],
        "pink" => [255, 192, 203],
        "purple" => [128, 0, 128],
        _ => return None,
    };
    Some(Rgb(named))
}

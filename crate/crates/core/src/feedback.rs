//! Per-persona feedback on text, image and theme; structural guardrails;
//! grouping into units; applying accepted text and image feedback.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canvas::{rasterize_with, set_image_source, set_text, CanvasDocument, CanvasError, ElementKind};
use crate::discussion::Conclusion;
use crate::gateway::{Gateway, GatewayError, ModelRequest, ResponseSchema};
use crate::persona::{BriefExtract, Level, Persona, PersonaSet};
use crate::prompt::{document_block, grounding, persona_profile, JSON_ONLY};

pub const TAG_GENERATE: &str = "feedback.generate";
pub const TAG_IMAGE: &str = "feedback.image";
/// Target of poster-level theme feedback.
pub const THEME_TARGET: &str = "THEME";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FeedbackError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Canvas(#[from] CanvasError),
    #[error("{0}")]
    Guardrail(GuardrailViolation),
    #[error("feedback of kind {actual} cannot be applied as {expected}")]
    KindMismatch { expected: FeedbackKind, actual: FeedbackKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Text,
    Image,
    Theme,
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::Text => "text",
            FeedbackKind::Image => "image",
            FeedbackKind::Theme => "theme",
        }
    }

    fn element_kind(self) -> Option<ElementKind> {
        match self {
            FeedbackKind::Text => Some(ElementKind::Text),
            FeedbackKind::Image => Some(ElementKind::Image),
            FeedbackKind::Theme => None,
        }
    }
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThemeDescriptor {
    pub tone: String,
    pub color: String,
}

/// The actionable part of feedback: replacement text, a one-line image
/// description, or a tone/color pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preview {
    Text { text: String },
    Image { description: String },
    Theme { tone: String, color: String },
}

impl Preview {
    pub fn kind(&self) -> FeedbackKind {
        match self {
            Preview::Text { .. } => FeedbackKind::Text,
            Preview::Image { .. } => FeedbackKind::Image,
            Preview::Theme { .. } => FeedbackKind::Theme,
        }
    }

    pub fn descriptor(&self) -> Option<ThemeDescriptor> {
        match self {
            Preview::Theme { tone, color } => Some(ThemeDescriptor {
                tone: tone.clone(),
                color: color.clone(),
            }),
            _ => None,
        }
    }

    /// One-line rendering for prompts and summaries.
    pub fn describe(&self) -> String {
        match self {
            Preview::Text { text } => format!("text: \"{text}\""),
            Preview::Image { description } => format!("image: {description}"),
            Preview::Theme { tone, color } => format!("theme: tone {tone}, colors {color}"),
        }
    }

    fn empty_field(&self) -> Option<&'static str> {
        let fields: &[(&'static str, &String)] = match self {
            Preview::Text { text } => &[("text", text)],
            Preview::Image { description } => &[("description", description)],
            Preview::Theme { tone, color } => &[("tone", tone), ("color", color)],
        };
        fields.iter().find(|(_, v)| v.trim().is_empty()).map(|(n, _)| *n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    /// `<persona_id>.<target>`
    pub item_id: String,
    pub persona_id: String,
    pub target: String,
    pub kind: FeedbackKind,
    pub opinion: String,
    pub preview: Preview,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardrailViolation {
    pub rule: String,
    pub detail: String,
}

impl GuardrailViolation {
    fn new(rule: &str, detail: impl Into<String>) -> Self {
        GuardrailViolation {
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for GuardrailViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "guardrail `{}`: {}", self.rule, self.detail)
    }
}

/// Structural rules shared by feedback items and conclusions: the target
/// exists with a kind matching the preview.
pub fn check_target(doc: &CanvasDocument, target: &str, kind: FeedbackKind, preview: &Preview) -> Result<(), GuardrailViolation> {
    if preview.kind() != kind {
        return Err(GuardrailViolation::new(
            "kind-mismatch",
            format!("{kind} feedback carries a {} preview", preview.kind()),
        ));
    }
    match kind.element_kind() {
        None => {
            if target != THEME_TARGET {
                return Err(GuardrailViolation::new("kind-mismatch", format!("theme feedback must target {THEME_TARGET}, not `{target}`")));
            }
        }
        Some(want) => match doc.find_element(target) {
            Err(_) => return Err(GuardrailViolation::new("unknown-target", format!("no element `{target}`"))),
            Ok(e) if e.kind() != want => {
                return Err(GuardrailViolation::new(
                    "kind-mismatch",
                    format!("`{target}` is a {} element, feedback is {kind}", e.kind()),
                ))
            }
            Ok(_) => {}
        },
    }
    if let Some(field) = preview.empty_field() {
        return Err(GuardrailViolation::new("empty-preview-field", format!("preview `{field}` is empty")));
    }
    Ok(())
}

pub fn guardrail_check(item: &FeedbackItem, doc: &CanvasDocument) -> Result<(), GuardrailViolation> {
    check_target(doc, &item.target, item.kind, &item.preview)?;
    if item.opinion.trim().is_empty() {
        return Err(GuardrailViolation::new("empty-opinion", "opinion is empty"));
    }
    if item.rationale.trim().is_empty() {
        return Err(GuardrailViolation::new("empty-rationale", "rationale is empty"));
    }
    if item.persona_id.trim().is_empty() {
        return Err(GuardrailViolation::new("missing-persona", "item has no persona"));
    }
    Ok(())
}

/// Preview as the model writes it: a string, or a tone/color object.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RawPreview {
    Line(String),
    Theme { tone: String, color: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawFeedback {
    pub target: String,
    pub kind: FeedbackKind,
    pub opinion: String,
    pub preview: RawPreview,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FeedbackReply {
    pub items: Vec<RawFeedback>,
}

impl ResponseSchema for FeedbackReply {
    const SCHEMA_ID: &'static str = TAG_GENERATE;
}

impl RawFeedback {
    fn into_item(self, persona_id: &str) -> Result<FeedbackItem, GuardrailViolation> {
        let preview = match (self.kind, self.preview) {
            (FeedbackKind::Text, RawPreview::Line(text)) => Preview::Text { text },
            (FeedbackKind::Image, RawPreview::Line(description)) => Preview::Image { description },
            (FeedbackKind::Theme, RawPreview::Theme { tone, color }) => Preview::Theme { tone, color },
            (kind, _) => {
                return Err(GuardrailViolation::new(
                    "kind-mismatch",
                    format!("{kind} preview must be {}", if kind == FeedbackKind::Theme { "a {tone, color} object" } else { "a string" }),
                ))
            }
        };
        Ok(FeedbackItem {
            item_id: format!("{persona_id}.{}", self.target),
            persona_id: persona_id.to_string(),
            target: self.target,
            kind: self.kind,
            opinion: self.opinion,
            preview,
            rationale: self.rationale,
        })
    }
}

/// Turns one persona's reply into items, enforcing every per-item rule plus
/// at most one item per element and exactly one theme item.
pub fn items_from_reply(reply: &FeedbackReply, persona_id: &str, doc: &CanvasDocument) -> Result<Vec<FeedbackItem>, GuardrailViolation> {
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(reply.items.len());
    for raw in &reply.items {
        let item = raw.clone().into_item(persona_id)?;
        guardrail_check(&item, doc)?;
        if !seen.insert(item.target.clone()) {
            return Err(GuardrailViolation::new("duplicate-target", format!("more than one item for `{}`", item.target)));
        }
        items.push(item);
    }
    if !seen.contains(THEME_TARGET) {
        return Err(GuardrailViolation::new("missing-theme", "exactly one theme item is required"));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaFailure {
    pub persona_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeedbackBatch {
    pub items: Vec<FeedbackItem>,
    pub failures: Vec<PersonaFailure>,
}

const FEEDBACK_SYSTEM: &str = "You are a member of the poster's target audience, described below. Critique \
the poster from your own perspective while serving the marketing goal and using details from the brief. \
Give at most one item per text or image element (skip elements you have no view on) and exactly one theme \
item targeting \"THEME\". For text: preview is the full replacement text. For image: preview is a one-line \
description of the image to generate. For theme: preview is {\"tone\": short phrase, \"color\": short \
phrase}. Every item needs an opinion and a rationale grounded in your persona, the goal and the brief.";

pub fn feedback_request(doc: &CanvasDocument, persona: &Persona, extract: &BriefExtract, gw: &Gateway) -> ModelRequest {
    let mut req = ModelRequest::new(TAG_GENERATE, FeedbackReply::SCHEMA_ID)
        .system(format!(
            "{FEEDBACK_SYSTEM}\n{JSON_ONLY}\nShape: {{\"items\": [{{\"target\": element id or \"THEME\", \"kind\": \"text\"|\"image\"|\"theme\", \
             \"opinion\": str, \"preview\": str or {{\"tone\", \"color\"}}, \"rationale\": str}}]}}\n\n{}",
            persona_profile(persona)
        ))
        .text(grounding(extract))
        .text(document_block(doc));
    if let Ok(img) = rasterize_with(doc, gw.assets()) {
        req = req.image(std::sync::Arc::new(img));
    }
    req
}

/// One generation call per persona, fanned out. A persona whose reply
/// fails is reported in `failures`; the others still contribute.
pub fn generate_feedback(gw: &Gateway, doc: &CanvasDocument, set: &PersonaSet, extract: &BriefExtract) -> FeedbackBatch {
    let mut batch = FeedbackBatch::default();
    if !gw.has_chat() {
        for p in &set.personas {
            batch.items.push(heuristic_theme_item(p));
        }
        return batch;
    }
    let reqs: Vec<ModelRequest> = set.personas.iter().map(|p| feedback_request(doc, p, extract, gw)).collect();
    let check = |i: usize, r: &FeedbackReply| {
        items_from_reply(r, &set.personas[i].id, doc)
            .map(|_| ())
            .map_err(|v| v.to_string())
    };
    let results = gw.complete_batch::<FeedbackReply>(&reqs, &check);
    for (p, r) in set.personas.iter().zip(results) {
        match r.and_then(|(reply, _)| {
            items_from_reply(&reply, &p.id, doc).map_err(|v| GatewayError::generation(TAG_GENERATE, v.to_string()))
        }) {
            Ok(items) => batch.items.extend(items),
            Err(e) => batch.failures.push(PersonaFailure {
                persona_id: p.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    batch
}

fn heuristic_theme_item(p: &Persona) -> FeedbackItem {
    let (tone, color) = match p.coords {
        Some((Level::Low, Level::Low)) => ("calm and minimal", "soft neutrals"),
        Some((Level::Low, Level::High)) => ("warm and inviting", "warm earth tones"),
        Some((Level::High, Level::Low)) => ("bold and energetic", "high-contrast brights"),
        Some((Level::High, Level::High)) => ("playful and lively", "pastel accents"),
        None => ("clean and modern", "monochrome"),
    };
    FeedbackItem {
        item_id: format!("{}.{THEME_TARGET}", p.id),
        persona_id: p.id.clone(),
        target: THEME_TARGET.to_string(),
        kind: FeedbackKind::Theme,
        opinion: format!("As {}, I would respond to a {tone} look.", p.name),
        preview: Preview::Theme {
            tone: tone.into(),
            color: color.into(),
        },
        rationale: p.rationale.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    /// One item, or several that agree; waiting for the user to accept.
    Pending,
    /// Several items that may disagree. `conflict_summary` is filled by
    /// conflict detection.
    Conflict,
    /// A conclusion was reached or an item was accepted.
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackUnit {
    /// `<kind>:<target>`
    pub unit_id: String,
    pub target: String,
    pub kind: FeedbackKind,
    pub items: Vec<FeedbackItem>,
    pub status: UnitStatus,
    pub conflict_summary: Option<String>,
    pub conclusion: Option<Conclusion>,
    /// Ref of the accepted item or conclusion, once applied.
    pub accepted: Option<String>,
}

impl FeedbackUnit {
    pub fn item(&self, item_id: &str) -> Option<&FeedbackItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }
}

pub fn unit_id(kind: FeedbackKind, target: &str) -> String {
    format!("{kind}:{target}")
}

/// Partitions items by (target, kind). Units follow document order with the
/// theme unit last; items keep their input order.
pub fn group_units(items: &[FeedbackItem], doc: &CanvasDocument) -> Vec<FeedbackUnit> {
    let mut units: Vec<FeedbackUnit> = Vec::new();
    for item in items {
        match units.iter_mut().find(|u| u.target == item.target && u.kind == item.kind) {
            Some(u) => u.items.push(item.clone()),
            None => units.push(FeedbackUnit {
                unit_id: unit_id(item.kind, &item.target),
                target: item.target.clone(),
                kind: item.kind,
                items: vec![item.clone()],
                status: UnitStatus::Pending,
                conflict_summary: None,
                conclusion: None,
                accepted: None,
            }),
        }
    }
    for u in &mut units {
        if u.items.len() >= 2 {
            u.status = UnitStatus::Conflict;
        }
    }
    let order = |u: &FeedbackUnit| -> (usize, String) {
        match doc.position_of(&u.target) {
            Some(p) if u.kind != FeedbackKind::Theme => (p, String::new()),
            _ => (usize::MAX, u.target.clone()),
        }
    };
    units.sort_by_key(order);
    units
}

pub fn apply_text_feedback(doc: &CanvasDocument, item: &FeedbackItem) -> Result<CanvasDocument, FeedbackError> {
    match &item.preview {
        Preview::Text { text } if item.kind == FeedbackKind::Text => Ok(set_text(doc, &item.target, text)?),
        _ => Err(FeedbackError::KindMismatch {
            expected: FeedbackKind::Text,
            actual: item.kind,
        }),
    }
}

pub fn image_prompt(description: &str) -> String {
    description.trim().to_string()
}

pub fn apply_image_feedback(gw: &Gateway, doc: &CanvasDocument, item: &FeedbackItem) -> Result<CanvasDocument, FeedbackError> {
    match &item.preview {
        Preview::Image { .. } if item.kind == FeedbackKind::Image => apply_preview(gw, doc, &item.target, &item.preview),
        _ => Err(FeedbackError::KindMismatch {
            expected: FeedbackKind::Image,
            actual: item.kind,
        }),
    }
}

/// Applies a text or image preview to `target`. Theme previews need a
/// template choice and go through the theme engine instead.
pub fn apply_preview(gw: &Gateway, doc: &CanvasDocument, target: &str, preview: &Preview) -> Result<CanvasDocument, FeedbackError> {
    match preview {
        Preview::Text { text } => Ok(set_text(doc, target, text)?),
        Preview::Image { description } => {
            // check the target before spending a generation call
            let e = doc.find_element(target)?;
            if e.kind() != ElementKind::Image {
                return Err(CanvasError::KindMismatch {
                    id: target.to_string(),
                    expected: ElementKind::Image,
                    actual: e.kind(),
                }
                .into());
            }
            let asset = gw.generate_image(TAG_IMAGE, &image_prompt(description))?;
            Ok(set_image_source(doc, target, asset.as_str())?)
        }
        Preview::Theme { .. } => Err(FeedbackError::KindMismatch {
            expected: FeedbackKind::Image,
            actual: FeedbackKind::Theme,
        }),
    }
}

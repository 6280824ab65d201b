//! Pipeline stages shared by the session service and the batch CLI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use posterpanel::discussion::{self, Conclusion, ConflictReport, Discussion, DiscussionError};
use posterpanel::feedback::{
    self, apply_preview, group_units, guardrail_check, FeedbackError, FeedbackItem, FeedbackKind, FeedbackUnit,
    PersonaFailure, Preview,
};
use posterpanel::persona::{BriefExtract, PersonaSet};
use posterpanel::theme::{apply_theme, ThemeError};
use posterpanel::{CanvasDocument, Gateway};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Discussion(#[from] DiscussionError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Theme(#[from] ThemeError),
    #[error("unknown ref `{0}`")]
    UnknownRef(String),
    #[error("ref `{reference}` is not applicable: {reason}")]
    NotApplicable { reference: String, reason: String },
    #[error("accepting theme feedback needs a template choice")]
    TemplateRequired,
}

/// Feedback for one poster, grouped into units with conflicts detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub items: Vec<FeedbackItem>,
    pub failures: Vec<PersonaFailure>,
    pub units: Vec<FeedbackUnit>,
    pub conflicts: BTreeMap<String, ConflictReport>,
}

pub fn review(gw: &Gateway, doc: &CanvasDocument, set: &PersonaSet, extract: &BriefExtract) -> Result<Review, PipelineError> {
    let batch = feedback::generate_feedback(gw, doc, set, extract);
    let mut units = group_units(&batch.items, doc);
    let mut conflicts = BTreeMap::new();
    for u in &mut units {
        let report = discussion::detect_conflict(gw, u, set, extract)?;
        *u = discussion::mark_detection(u, report.as_ref());
        if let Some(r) = report {
            conflicts.insert(u.unit_id.clone(), r);
        }
    }
    Ok(Review {
        items: batch.items,
        failures: batch.failures,
        units,
        conflicts,
    })
}

/// Discusses every conflicted unit once without a user comment, in unit
/// order. Returns the discussions and the units updated with conclusions.
pub fn auto_discuss(
    gw: &Gateway,
    review: &Review,
    set: &PersonaSet,
    extract: &BriefExtract,
    doc: &CanvasDocument,
    max_rounds: u32,
) -> Result<(Vec<Discussion>, Vec<FeedbackUnit>), PipelineError> {
    let mut discussions = Vec::new();
    let mut units = review.units.clone();
    for u in &mut units {
        let Some(report) = review.conflicts.get(&u.unit_id) else {
            continue;
        };
        let d = discussion::open_discussion(u, report, format!("d{}", discussions.len() + 1), max_rounds)?;
        let (d, resolved) = discussion::advance(gw, &d, u, set, extract, doc)?;
        *u = resolved;
        discussions.push(d);
    }
    Ok((discussions, units))
}

/// What an accept ref points at.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub reference: String,
    pub unit_id: String,
    pub target: String,
    pub kind: FeedbackKind,
    pub preview: Preview,
}

/// Looks up an item id (`p1.headline`) or a conclusion ref
/// (`conclusion:<discussion>:<round>`) and checks it against `doc`.
pub fn resolve_ref<'a>(
    reference: &str,
    units: &[FeedbackUnit],
    discussions: impl IntoIterator<Item = &'a Discussion>,
    doc: &CanvasDocument,
) -> Result<Resolved, PipelineError> {
    let resolved = if reference.starts_with("conclusion:") {
        let d = discussions
            .into_iter()
            .find(|d| d.conclusion_ref() == reference)
            .ok_or_else(|| PipelineError::UnknownRef(reference.to_string()))?;
        let c: &Conclusion = d.conclusion.as_ref().ok_or_else(|| PipelineError::NotApplicable {
            reference: reference.to_string(),
            reason: "the discussion has no conclusion yet".into(),
        })?;
        let u = units
            .iter()
            .find(|u| u.unit_id == d.unit_id)
            .ok_or_else(|| PipelineError::UnknownRef(reference.to_string()))?;
        feedback::check_target(doc, &c.target, u.kind, &c.preview).map_err(|v| PipelineError::NotApplicable {
            reference: reference.to_string(),
            reason: v.to_string(),
        })?;
        Resolved {
            reference: reference.to_string(),
            unit_id: u.unit_id.clone(),
            target: c.target.clone(),
            kind: u.kind,
            preview: c.preview.clone(),
        }
    } else {
        let (u, item) = units
            .iter()
            .find_map(|u| u.item(reference).map(|i| (u, i)))
            .ok_or_else(|| PipelineError::UnknownRef(reference.to_string()))?;
        guardrail_check(item, doc).map_err(|v| PipelineError::NotApplicable {
            reference: reference.to_string(),
            reason: v.to_string(),
        })?;
        Resolved {
            reference: reference.to_string(),
            unit_id: u.unit_id.clone(),
            target: item.target.clone(),
            kind: item.kind,
            preview: item.preview.clone(),
        }
    };
    Ok(resolved)
}

/// Result of applying a resolved ref.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub document: CanvasDocument,
    pub template_id: Option<String>,
}

/// Applies text and image previews directly; theme previews need the chosen
/// template document.
pub fn apply_resolved(
    gw: &Gateway,
    doc: &CanvasDocument,
    r: &Resolved,
    template: Option<(&str, &CanvasDocument)>,
    overlap_rounds: u32,
) -> Result<Applied, PipelineError> {
    match r.kind {
        FeedbackKind::Theme => {
            let (id, tpl) = template.ok_or(PipelineError::TemplateRequired)?;
            let out = apply_theme(gw, doc, tpl, overlap_rounds)?;
            Ok(Applied {
                document: out.document,
                template_id: Some(id.to_string()),
            })
        }
        FeedbackKind::Text | FeedbackKind::Image => Ok(Applied {
            document: apply_preview(gw, doc, &r.target, &r.preview)?,
            template_id: None,
        }),
    }
}

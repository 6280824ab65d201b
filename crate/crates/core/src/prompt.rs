//! Prompt fragments shared by every engine. Each downstream prompt carries
//! the marketing goal and the verbatim brief so generated feedback stays
//! tied to the campaign.

use crate::canvas::{serialize_document, CanvasDocument};
use crate::persona::{BriefExtract, Persona, PersonaSet};

pub(crate) const JSON_ONLY: &str = "Reply with a single JSON object and nothing else.";

pub(crate) fn grounding(extract: &BriefExtract) -> String {
    let mut s = format!(
        "Marketing goal: {}\nTarget audience: {}\n",
        extract.goal, extract.audience_summary
    );
    if !extract.constraints.is_empty() {
        s.push_str("Constraints:\n");
        for c in &extract.constraints {
            s.push_str("- ");
            s.push_str(c);
            s.push('\n');
        }
    }
    s.push_str("\nMarketing brief (verbatim):\n<<<\n");
    s.push_str(&extract.raw_text);
    s.push_str("\n>>>");
    s
}

pub(crate) fn persona_profile(p: &Persona) -> String {
    format!(
        "Persona {id}: {name}\nSummary: {summary}\nBackground: {background}\nGoal/motivation: {motivation}\n\
         Challenge/pain point: {pain}\nNeed: {need}\nQuote: \"{quote}\"",
        id = p.id,
        name = p.name,
        summary = p.summary,
        background = p.background,
        motivation = p.motivation,
        pain = p.pain_point,
        need = p.need,
        quote = p.quote,
    )
}

pub(crate) fn panel_roster(set: &PersonaSet) -> String {
    set.personas
        .iter()
        .map(|p| format!("- {} ({}): {}", p.id, p.name, p.summary))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn document_block(doc: &CanvasDocument) -> String {
    format!("Poster document (canvas JSON):\n{}", serialize_document(doc))
}

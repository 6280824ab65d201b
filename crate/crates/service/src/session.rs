//! Session state as a fold over its event log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use posterpanel::discussion::{ConflictReport, Discussion, Turn};
use posterpanel::feedback::{FeedbackItem, FeedbackUnit, PersonaFailure};
use posterpanel::persona::{BriefExtract, MarketingBrief, Persona, PersonaSet};
use posterpanel::CanvasDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    /// Uploads stored; the panel is being built.
    Created,
    PersonasReady,
    FeedbackReady,
    Failed { stage: String, message: String },
}

impl SessionStatus {
    pub fn is_settled(&self) -> bool {
        matches!(self, SessionStatus::FeedbackReady | SessionStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Upload,
    Accepted { reference: String },
    ManualEdit,
    Theme { reference: String, template_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub index: usize,
    pub document: CanvasDocument,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub status: SessionStatus,
    pub brief: MarketingBrief,
    pub max_rounds: u32,
    pub extract: Option<BriefExtract>,
    pub personas: Option<PersonaSet>,
    pub items: Vec<FeedbackItem>,
    pub failures: Vec<PersonaFailure>,
    pub units: Vec<FeedbackUnit>,
    pub conflicts: BTreeMap<String, ConflictReport>,
    pub discussions: BTreeMap<String, Discussion>,
    pub discussions_opened: u32,
    pub history: Vec<Snapshot>,
    /// Accepted refs and the snapshot each produced.
    pub accepted: BTreeMap<String, usize>,
    pub last_seq: u64,
}

impl Session {
    pub fn document(&self) -> &CanvasDocument {
        &self.history.last().expect("history starts with the upload").document
    }

    pub fn unit(&self, unit_id: &str) -> Option<&FeedbackUnit> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    Created {
        brief: MarketingBrief,
        document: CanvasDocument,
        max_rounds: u32,
    },
    PersonasReady {
        extract: BriefExtract,
        personas: PersonaSet,
    },
    PersonaAdded {
        persona: Persona,
    },
    FeedbackReady {
        items: Vec<FeedbackItem>,
        failures: Vec<PersonaFailure>,
        units: Vec<FeedbackUnit>,
        conflicts: BTreeMap<String, ConflictReport>,
    },
    /// One transcript turn. `discussion` is the discussion as of this turn.
    Turn {
        unit_id: String,
        turn: Turn,
        discussion: Discussion,
        unit: FeedbackUnit,
    },
    /// A discussion change that adds no turn.
    DiscussionUpdated {
        unit_id: String,
        discussion: Discussion,
    },
    Accepted {
        reference: String,
        unit_id: String,
        document: CanvasDocument,
    },
    ManualEdit {
        document: CanvasDocument,
    },
    ThemeApplied {
        reference: String,
        unit_id: String,
        template_id: String,
        document: CanvasDocument,
    },
    Failed {
        stage: String,
        message: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Created { .. } => "created",
            EventPayload::PersonasReady { .. } => "personas_ready",
            EventPayload::PersonaAdded { .. } => "persona_added",
            EventPayload::FeedbackReady { .. } => "feedback_ready",
            EventPayload::Turn { .. } => "turn",
            EventPayload::DiscussionUpdated { .. } => "discussion_updated",
            EventPayload::Accepted { .. } => "accepted",
            EventPayload::ManualEdit { .. } => "manual_edit",
            EventPayload::ThemeApplied { .. } => "theme_applied",
            EventPayload::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub session_id: String,
    #[serde(flatten)]
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReplayError {
    #[error("event {seq} is out of order after {last}")]
    OutOfOrder { seq: u64, last: u64 },
    #[error("event {0} belongs to another session")]
    ForeignSession(u64),
    #[error("the first event must be `created`")]
    MissingCreated,
    #[error("event {seq} ({kind}) does not fit the session: {detail}")]
    Inconsistent { seq: u64, kind: &'static str, detail: String },
}

/// Starts a session from its `created` event.
pub fn genesis(ev: &EventRecord) -> Result<Session, ReplayError> {
    let EventPayload::Created { brief, document, max_rounds } = &ev.payload else {
        return Err(ReplayError::MissingCreated);
    };
    Ok(Session {
        session_id: ev.session_id.clone(),
        status: SessionStatus::Created,
        brief: brief.clone(),
        max_rounds: *max_rounds,
        extract: None,
        personas: None,
        items: Vec::new(),
        failures: Vec::new(),
        units: Vec::new(),
        conflicts: BTreeMap::new(),
        discussions: BTreeMap::new(),
        discussions_opened: 0,
        history: vec![Snapshot {
            index: 0,
            document: document.clone(),
            provenance: Provenance::Upload,
        }],
        accepted: BTreeMap::new(),
        last_seq: ev.seq,
    })
}

fn push_snapshot(s: &mut Session, document: &CanvasDocument, provenance: Provenance) {
    let index = s.history.len();
    s.history.push(Snapshot {
        index,
        document: document.clone(),
        provenance,
    });
}

fn resolve_unit(s: &mut Session, unit_id: &str, reference: &str) -> Result<(), String> {
    let u = s
        .units
        .iter_mut()
        .find(|u| u.unit_id == unit_id)
        .ok_or_else(|| format!("unknown unit `{unit_id}`"))?;
    u.status = posterpanel::feedback::UnitStatus::Resolved;
    u.accepted = Some(reference.to_string());
    Ok(())
}

fn replace_unit(s: &mut Session, unit: &FeedbackUnit) -> Result<(), String> {
    let slot = s
        .units
        .iter_mut()
        .find(|u| u.unit_id == unit.unit_id)
        .ok_or_else(|| format!("unknown unit `{}`", unit.unit_id))?;
    *slot = unit.clone();
    Ok(())
}

/// Folds one event into the state. Pure: replaying a log reproduces the
/// state the live service held.
pub fn apply(state: &Session, ev: &EventRecord) -> Result<Session, ReplayError> {
    if ev.seq <= state.last_seq {
        return Err(ReplayError::OutOfOrder {
            seq: ev.seq,
            last: state.last_seq,
        });
    }
    if ev.session_id != state.session_id {
        return Err(ReplayError::ForeignSession(ev.seq));
    }
    let mut s = state.clone();
    let bad = |detail: String| ReplayError::Inconsistent {
        seq: ev.seq,
        kind: ev.payload.kind(),
        detail,
    };
    match &ev.payload {
        EventPayload::Created { .. } => return Err(bad("session already exists".into())),
        EventPayload::PersonasReady { extract, personas } => {
            s.extract = Some(extract.clone());
            s.personas = Some(personas.clone());
            s.status = SessionStatus::PersonasReady;
        }
        EventPayload::PersonaAdded { persona } => {
            let set = s.personas.as_mut().ok_or_else(|| bad("no persona set yet".into()))?;
            set.personas.push(persona.clone());
        }
        EventPayload::FeedbackReady {
            items,
            failures,
            units,
            conflicts,
        } => {
            s.items = items.clone();
            s.failures = failures.clone();
            s.units = units.clone();
            s.conflicts = conflicts.clone();
            s.status = SessionStatus::FeedbackReady;
        }
        EventPayload::Turn {
            unit_id,
            discussion,
            unit,
            ..
        } => {
            let fresh = s.discussions.get(unit_id).is_none_or(|d| d.discussion_id != discussion.discussion_id);
            if fresh {
                s.discussions_opened += 1;
            }
            s.discussions.insert(unit_id.clone(), discussion.clone());
            replace_unit(&mut s, unit).map_err(bad)?;
        }
        EventPayload::DiscussionUpdated { unit_id, discussion } => {
            if !s.discussions.contains_key(unit_id) {
                return Err(bad(format!("no discussion on `{unit_id}`")));
            }
            s.discussions.insert(unit_id.clone(), discussion.clone());
        }
        EventPayload::Accepted {
            reference,
            unit_id,
            document,
        } => {
            resolve_unit(&mut s, unit_id, reference).map_err(bad)?;
            push_snapshot(
                &mut s,
                document,
                Provenance::Accepted {
                    reference: reference.clone(),
                },
            );
            s.accepted.insert(reference.clone(), s.history.len() - 1);
        }
        EventPayload::ManualEdit { document } => push_snapshot(&mut s, document, Provenance::ManualEdit),
        EventPayload::ThemeApplied {
            reference,
            unit_id,
            template_id,
            document,
        } => {
            resolve_unit(&mut s, unit_id, reference).map_err(bad)?;
            push_snapshot(
                &mut s,
                document,
                Provenance::Theme {
                    reference: reference.clone(),
                    template_id: template_id.clone(),
                },
            );
            s.accepted.insert(reference.clone(), s.history.len() - 1);
        }
        EventPayload::Failed { stage, message } => {
            s.status = SessionStatus::Failed {
                stage: stage.clone(),
                message: message.clone(),
            };
        }
    }
    s.last_seq = ev.seq;
    Ok(s)
}

/// Rebuilds a session from a complete log.
pub fn replay(events: &[EventRecord]) -> Result<Session, ReplayError> {
    let (first, rest) = events.split_first().ok_or(ReplayError::MissingCreated)?;
    rest.iter().try_fold(genesis(first)?, |s, ev| apply(&s, ev))
}

/// Events for a discussion step: one `turn` per new transcript entry, or a
/// single `discussion_updated` when the step added none. Each turn carries
/// the discussion truncated to that turn; only the last carries the updated
/// unit.
pub fn discussion_events(before_len: usize, after: &Discussion, unit_before: &FeedbackUnit, unit_after: &FeedbackUnit) -> Vec<EventPayload> {
    let new_turns = &after.transcript[before_len.min(after.transcript.len())..];
    if new_turns.is_empty() {
        return vec![EventPayload::DiscussionUpdated {
            unit_id: after.unit_id.clone(),
            discussion: after.clone(),
        }];
    }
    new_turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let upto = before_len + i + 1;
            let mut d = after.clone();
            d.transcript.truncate(upto);
            EventPayload::Turn {
                unit_id: after.unit_id.clone(),
                turn: turn.clone(),
                discussion: d,
                unit: if upto == after.transcript.len() { unit_after.clone() } else { unit_before.clone() },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use posterpanel::Element;

    fn created() -> EventRecord {
        EventRecord {
            seq: 1,
            session_id: "s".into(),
            payload: EventPayload::Created {
                brief: MarketingBrief::from_text("b", "Goal: x"),
                document: CanvasDocument::new(100, 100, vec![Element::text("t", 0.0, 0.0, 10.0, 10.0, "hi")]).unwrap(),
                max_rounds: 5,
            },
        }
    }

    #[test]
    fn record_wire_form() {
        let ev = created();
        let v = serde_json::to_value(&ev).unwrap();
        assert_eq!(v["kind"], "created");
        assert_eq!(v["seq"], 1);
        assert!(v["payload"]["document"].is_object());
        assert_eq!(serde_json::from_value::<EventRecord>(v).unwrap(), ev);
    }

    #[test]
    fn replay_orders_and_counts() {
        let s = replay(&[created()]).unwrap();
        assert_eq!(s.history.len(), 1);
        assert_eq!(s.status, SessionStatus::Created);
        let doc = s.document().clone();
        let edit = EventRecord {
            seq: 2,
            session_id: "s".into(),
            payload: EventPayload::ManualEdit { document: doc },
        };
        let s2 = apply(&s, &edit).unwrap();
        assert_eq!(s2.history.len(), 2);
        assert_eq!(s2.history[1].provenance, Provenance::ManualEdit);
        assert!(matches!(apply(&s2, &edit), Err(ReplayError::OutOfOrder { .. })));
        assert!(matches!(replay(&[edit]), Err(ReplayError::MissingCreated)));
    }
}

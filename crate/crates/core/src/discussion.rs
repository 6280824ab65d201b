//! Conflict detection and the moderated panel discussion.
//!
//! A discussion moves through
//! `awaiting_comment → questioning → answering → concluding → concluded`;
//! from `concluded` a new user comment opens another round, up to
//! `max_rounds`. Every operation is a pure function returning the next
//! discussion value; transcripts only grow.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canvas::CanvasDocument;
use crate::feedback::{check_target, FeedbackItem, FeedbackKind, FeedbackUnit, Preview, RawPreview, UnitStatus};
use crate::gateway::{Gateway, GatewayError, ModelRequest, ResponseSchema};
use crate::persona::{BriefExtract, PersonaSet};
use crate::prompt::{grounding, panel_roster, persona_profile, JSON_ONLY};

pub const TAG_DETECT: &str = "discuss.detect";
pub const TAG_QUESTION: &str = "discuss.question";
pub const TAG_ANSWER: &str = "discuss.answer";
pub const TAG_CONCLUDE: &str = "discuss.conclude";
pub const DEFAULT_MAX_ROUNDS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscussionState {
    AwaitingComment,
    Questioning,
    Answering,
    Concluding,
    Concluded,
}

impl DiscussionState {
    pub const ALL: [DiscussionState; 5] = [
        DiscussionState::AwaitingComment,
        DiscussionState::Questioning,
        DiscussionState::Answering,
        DiscussionState::Concluding,
        DiscussionState::Concluded,
    ];
}

impl fmt::Display for DiscussionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscussionState::AwaitingComment => "awaiting_comment",
            DiscussionState::Questioning => "questioning",
            DiscussionState::Answering => "answering",
            DiscussionState::Concluding => "concluding",
            DiscussionState::Concluded => "concluded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    SubmitComment,
    AskQuestions,
    CollectAnswers,
    Conclude,
}

impl Operation {
    pub const ALL: [Operation; 4] = [
        Operation::SubmitComment,
        Operation::AskQuestions,
        Operation::CollectAnswers,
        Operation::Conclude,
    ];
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operation::SubmitComment => "comment",
            Operation::AskQuestions => "ask questions",
            Operation::CollectAnswers => "collect answers",
            Operation::Conclude => "conclude",
        })
    }
}

/// The legal transition table. Round limits are checked separately.
pub fn transition(state: DiscussionState, op: Operation) -> Option<DiscussionState> {
    use DiscussionState::*;
    use Operation::*;
    match (state, op) {
        (AwaitingComment | Concluded, SubmitComment) => Some(Questioning),
        (Questioning, AskQuestions) => Some(Answering),
        (Answering, CollectAnswers) => Some(Concluding),
        (Concluding, Conclude) => Some(Concluded),
        _ => None,
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiscussionError {
    #[error("cannot {op} while the discussion is {state}")]
    State { state: DiscussionState, op: Operation },
    #[error("discussion already used its {0} rounds")]
    RoundLimit(u32),
    #[error("unit `{0}` has no conflict to discuss")]
    NoConflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("no persona answered: {0}")]
    NoAnswers(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Speaker {
    Moderator,
    User,
    Persona(String),
}

impl Serialize for Speaker {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Speaker::Moderator => s.serialize_str("moderator"),
            Speaker::User => s.serialize_str("user"),
            Speaker::Persona(id) => s.serialize_str(&format!("persona:{id}")),
        }
    }
}

impl<'de> Deserialize<'de> for Speaker {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "moderator" => Ok(Speaker::Moderator),
            "user" => Ok(Speaker::User),
            _ => match s.strip_prefix("persona:") {
                Some(id) if !id.is_empty() => Ok(Speaker::Persona(id.to_string())),
                _ => Err(serde::de::Error::custom(format!("unknown speaker `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    CommentRequest,
    UserComment,
    Question,
    Answer,
    ConclusionStatement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub round: u32,
    pub role_tag: RoleTag,
    /// Persona a moderator question is addressed to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub unit_id: String,
    pub summary: String,
    pub conflicting_item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conclusion {
    pub target: String,
    pub summary: String,
    pub preview: Preview,
    pub omitted_personas: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discussion {
    pub discussion_id: String,
    pub unit_id: String,
    pub conflict: ConflictReport,
    pub transcript: Vec<Turn>,
    pub state: DiscussionState,
    pub rounds_used: u32,
    pub max_rounds: u32,
    pub conclusion: Option<Conclusion>,
    /// Personas whose answer failed in the current round.
    #[serde(default)]
    pub failed_answers: Vec<String>,
}

impl Discussion {
    fn require(&self, op: Operation) -> Result<DiscussionState, DiscussionError> {
        transition(self.state, op).ok_or(DiscussionError::State { state: self.state, op })
    }

    fn push(&mut self, speaker: Speaker, role_tag: RoleTag, text: impl Into<String>, to: Option<String>) {
        self.transcript.push(Turn {
            speaker,
            text: text.into(),
            round: self.rounds_used,
            role_tag,
            to,
        });
    }

    /// Question turns of the current round, in order.
    pub fn current_questions(&self) -> Vec<&Turn> {
        self.transcript
            .iter()
            .filter(|t| t.round == self.rounds_used && t.role_tag == RoleTag::Question)
            .collect()
    }

    fn comments(&self) -> Vec<&Turn> {
        self.transcript.iter().filter(|t| t.role_tag == RoleTag::UserComment).collect()
    }

    /// Conclusion ref accepted by the session layer.
    pub fn conclusion_ref(&self) -> String {
        format!("conclusion:{}:{}", self.discussion_id, self.rounds_used)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DetectReply {
    pub conflict: bool,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub item_ids: Vec<String>,
}

impl ResponseSchema for DetectReply {
    const SCHEMA_ID: &'static str = TAG_DETECT;

    fn check(&self) -> Result<(), String> {
        if self.conflict {
            if self.summary.as_deref().is_none_or(|s| s.trim().is_empty()) {
                return Err("a conflict needs a one-line `summary`".into());
            }
            if self.item_ids.len() < 2 {
                return Err("a conflict involves at least two `item_ids`".into());
            }
        }
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn items_block(unit: &FeedbackUnit, set: &PersonaSet, only: Option<&BTreeSet<&str>>) -> String {
    unit.items
        .iter()
        .filter(|i| only.is_none_or(|o| o.contains(i.item_id.as_str())))
        .map(|i| {
            let who = set.get(&i.persona_id).map(|p| p.name.as_str()).unwrap_or("unknown persona");
            format!(
                "- item {} from {} ({}): opinion: {} | preview: {} | rationale: {}",
                i.item_id,
                i.persona_id,
                who,
                i.opinion,
                i.preview.describe(),
                i.rationale
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Finds disagreement within a unit. Single-item units never conflict. In
/// heuristic mode any two differing previews count as a conflict.
pub fn detect_conflict(
    gw: &Gateway,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    extract: &BriefExtract,
) -> Result<Option<ConflictReport>, DiscussionError> {
    if unit.items.len() < 2 {
        return Ok(None);
    }
    if gw.heuristics() {
        let distinct: BTreeSet<&Preview> = unit.items.iter().map(|i| &i.preview).collect();
        if distinct.len() < 2 {
            return Ok(None);
        }
        return Ok(Some(ConflictReport {
            unit_id: unit.unit_id.clone(),
            summary: format!(
                "{} personas suggest different {} changes for {}",
                unit.items.len(),
                unit.kind,
                if unit.kind == FeedbackKind::Theme { "the theme".to_string() } else { format!("`{}`", unit.target) }
            ),
            conflicting_item_ids: unit.items.iter().map(|i| i.item_id.clone()).collect(),
        }));
    }
    let req = ModelRequest::new(TAG_DETECT, DetectReply::SCHEMA_ID)
        .system(format!(
            "You moderate a panel of audience personas reviewing a poster. Decide whether the feedback items below \
             conflict, meaning they pull the component in different directions or focus on different things. If so, \
             list the conflicting item ids and give a one-line summary of the conflict.\n{JSON_ONLY}\n\
             Shape: {{\"conflict\": bool, \"summary\": str|null, \"item_ids\": [str]}}"
        ))
        .text(grounding(extract))
        .text(format!("Feedback on {} `{}`:\n{}", unit.kind, unit.target, items_block(unit, set, None)))
        .temperature(0.2);
    let check = |r: &DetectReply| -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for id in &r.item_ids {
            if unit.item(id).is_none() {
                return Err(format!("item `{id}` is not in this unit"));
            }
            if !seen.insert(id) {
                return Err(format!("item `{id}` listed twice"));
            }
        }
        Ok(())
    };
    let (reply, _) = gw.complete::<DetectReply>(&req, &check)?;
    if !reply.conflict {
        return Ok(None);
    }
    // keep unit order regardless of reply order
    let chosen: BTreeSet<&String> = reply.item_ids.iter().collect();
    Ok(Some(ConflictReport {
        unit_id: unit.unit_id.clone(),
        summary: one_line(reply.summary.as_deref().unwrap_or_default()),
        conflicting_item_ids: unit.items.iter().filter(|i| chosen.contains(&i.item_id)).map(|i| i.item_id.clone()).collect(),
    }))
}

/// Records the outcome of detection on the unit.
pub fn mark_detection(unit: &FeedbackUnit, report: Option<&ConflictReport>) -> FeedbackUnit {
    let mut u = unit.clone();
    if u.status == UnitStatus::Resolved {
        return u;
    }
    match report {
        Some(r) => {
            u.status = UnitStatus::Conflict;
            u.conflict_summary = Some(r.summary.clone());
        }
        None => {
            u.status = UnitStatus::Pending;
            u.conflict_summary = None;
        }
    }
    u
}

pub fn comment_request_text(report: &ConflictReport) -> String {
    format!(
        "The panel disagrees: {}. Do you have any opinion or constraint the discussion should center on?",
        report.summary
    )
}

pub fn open_discussion(unit: &FeedbackUnit, report: &ConflictReport, discussion_id: impl Into<String>, max_rounds: u32) -> Result<Discussion, DiscussionError> {
    if report.unit_id != unit.unit_id {
        return Err(DiscussionError::Invalid(format!(
            "conflict report for `{}` does not belong to unit `{}`",
            report.unit_id, unit.unit_id
        )));
    }
    if report.conflicting_item_ids.len() < 2 || report.summary.trim().is_empty() {
        return Err(DiscussionError::Invalid("conflict report needs a summary and two items".into()));
    }
    if let Some(id) = report.conflicting_item_ids.iter().find(|id| unit.item(id).is_none()) {
        return Err(DiscussionError::Invalid(format!("item `{id}` is not in unit `{}`", unit.unit_id)));
    }
    if max_rounds == 0 {
        return Err(DiscussionError::Invalid("max_rounds must be at least 1".into()));
    }
    let mut d = Discussion {
        discussion_id: discussion_id.into(),
        unit_id: unit.unit_id.clone(),
        conflict: report.clone(),
        transcript: Vec::new(),
        state: DiscussionState::AwaitingComment,
        rounds_used: 1,
        max_rounds,
        conclusion: None,
        failed_answers: Vec::new(),
    };
    d.push(Speaker::Moderator, RoleTag::CommentRequest, comment_request_text(report), None);
    Ok(d)
}

/// Takes an optional user comment. From `concluded` this opens a new round.
pub fn submit_comment(d: &Discussion, comment: Option<&str>) -> Result<Discussion, DiscussionError> {
    let next = d.require(Operation::SubmitComment)?;
    let mut out = d.clone();
    if d.state == DiscussionState::Concluded {
        if d.rounds_used >= d.max_rounds {
            return Err(DiscussionError::RoundLimit(d.max_rounds));
        }
        out.rounds_used += 1;
        out.failed_answers.clear();
    }
    if let Some(c) = comment.map(str::trim).filter(|c| !c.is_empty()) {
        out.push(Speaker::User, RoleTag::UserComment, c, None);
    }
    out.state = next;
    Ok(out)
}

/// Personas holding a conflicting item, in panel order.
pub fn conflicting_personas(d: &Discussion, unit: &FeedbackUnit, set: &PersonaSet) -> Vec<String> {
    let ids: BTreeSet<&str> = d
        .conflict
        .conflicting_item_ids
        .iter()
        .filter_map(|id| unit.item(id))
        .map(|i| i.persona_id.as_str())
        .collect();
    let mut out: Vec<String> = set.personas.iter().filter(|p| ids.contains(p.id.as_str())).map(|p| p.id.clone()).collect();
    for i in &unit.items {
        if ids.contains(i.persona_id.as_str()) && !out.contains(&i.persona_id) {
            out.push(i.persona_id.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PersonaQuestion {
    pub persona_id: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct QuestionReply {
    pub questions: Vec<PersonaQuestion>,
}

impl ResponseSchema for QuestionReply {
    const SCHEMA_ID: &'static str = TAG_QUESTION;

    fn check(&self) -> Result<(), String> {
        for q in &self.questions {
            if q.question.trim().is_empty() {
                return Err(format!("question for `{}` is empty", q.persona_id));
            }
        }
        Ok(())
    }
}

fn discussion_context(d: &Discussion, unit: &FeedbackUnit, set: &PersonaSet) -> String {
    let conflicting: BTreeSet<&str> = d.conflict.conflicting_item_ids.iter().map(String::as_str).collect();
    let mut s = format!(
        "Component: {} `{}`\nConflict: {}\nConflicting feedback:\n{}",
        unit.kind,
        unit.target,
        d.conflict.summary,
        items_block(unit, set, Some(&conflicting))
    );
    let comments = d.comments();
    if !comments.is_empty() {
        s.push_str("\nUser comments (treat as constraints, latest last):");
        for c in comments {
            s.push_str(&format!("\n- round {}: {}", c.round, c.text));
        }
    }
    if let Some(c) = &d.conclusion {
        s.push_str(&format!("\nPrevious conclusion: {} ({})", c.summary, c.preview.describe()));
    }
    s
}

pub fn ask_questions(
    gw: &Gateway,
    d: &Discussion,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    extract: &BriefExtract,
) -> Result<Discussion, DiscussionError> {
    let next = d.require(Operation::AskQuestions)?;
    let targets = conflicting_personas(d, unit, set);
    let questions: Vec<(String, String)> = if gw.has_chat() {
        let req = ModelRequest::new(TAG_QUESTION, QuestionReply::SCHEMA_ID)
            .system(format!(
                "You are the moderator of a panel of audience personas. For each listed persona, write one \
                 thought-provoking question that makes them explain and reconsider their position on the conflict, \
                 informed by the marketing goal, the brief and the user's comments.\n{JSON_ONLY}\n\
                 Shape: {{\"questions\": [{{\"persona_id\": str, \"question\": str}}]}}"
            ))
            .text(grounding(extract))
            .text(format!("Panel:\n{}", panel_roster(set)))
            .text(discussion_context(d, unit, set))
            .text(format!("Ask exactly these personas, one question each: {}", targets.join(", ")))
            .temperature(0.7);
        let check = |r: &QuestionReply| -> Result<(), String> {
            let got: Vec<&str> = r.questions.iter().map(|q| q.persona_id.as_str()).collect();
            let want: BTreeSet<&str> = targets.iter().map(String::as_str).collect();
            if got.len() != want.len() || got.iter().collect::<BTreeSet<_>>().len() != got.len() || !got.iter().all(|g| want.contains(g)) {
                return Err(format!("need exactly one question for each of: {}", targets.join(", ")));
            }
            Ok(())
        };
        let (reply, _) = gw.complete::<QuestionReply>(&req, &check)?;
        targets
            .iter()
            .map(|t| {
                let q = reply.questions.iter().find(|q| &q.persona_id == t).expect("checked");
                (t.clone(), one_line(&q.question))
            })
            .collect()
    } else {
        targets
            .iter()
            .map(|t| {
                let name = set.get(t).map(|p| p.name.clone()).unwrap_or_else(|| t.clone());
                (
                    t.clone(),
                    format!("{name}, how would your suggestion serve the goal \"{}\" for the rest of the audience?", extract.goal),
                )
            })
            .collect()
    };
    let mut out = d.clone();
    for (pid, q) in questions {
        out.push(Speaker::Moderator, RoleTag::Question, q, Some(pid));
    }
    out.state = next;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AnswerReply {
    pub answer: String,
}

impl ResponseSchema for AnswerReply {
    const SCHEMA_ID: &'static str = TAG_ANSWER;

    fn check(&self) -> Result<(), String> {
        if self.answer.trim().is_empty() {
            return Err("`answer` is empty".into());
        }
        Ok(())
    }
}

/// Answers every question of the current round in parallel. Personas whose
/// call fails are recorded in `failed_answers`; at least one must succeed.
pub fn collect_answers(
    gw: &Gateway,
    d: &Discussion,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    extract: &BriefExtract,
) -> Result<Discussion, DiscussionError> {
    let next = d.require(Operation::CollectAnswers)?;
    let questions: Vec<(String, String)> = d
        .current_questions()
        .iter()
        .filter_map(|t| t.to.clone().map(|p| (p, t.text.clone())))
        .collect();
    let results: Vec<Result<String, String>> = if gw.has_chat() {
        let reqs: Vec<ModelRequest> = questions
            .iter()
            .map(|(pid, q)| {
                let profile = set.get(pid).map(persona_profile).unwrap_or_else(|| format!("Persona {pid}"));
                let own = items_block(
                    unit,
                    set,
                    Some(&unit.items.iter().filter(|i| &i.persona_id == pid).map(|i| i.item_id.as_str()).collect()),
                );
                ModelRequest::new(TAG_ANSWER, AnswerReply::SCHEMA_ID)
                    .system(format!(
                        "You are the persona below, taking part in a moderated panel about a poster. Answer the \
                         moderator's question in your own voice. Stay open-minded and work toward a compromise that \
                         resolves the conflict while serving the marketing goal.\n{JSON_ONLY}\nShape: {{\"answer\": str}}\n\n{profile}"
                    ))
                    .text(grounding(extract))
                    .text(discussion_context(d, unit, set))
                    .text(format!("Your earlier feedback:\n{own}\n\nModerator's question to you: {q}"))
                    .temperature(0.8)
            })
            .collect();
        gw.complete_batch::<AnswerReply>(&reqs, &|_, _| Ok(()))
            .into_iter()
            .map(|r| r.map(|(a, _)| a.answer.trim().to_string()).map_err(|e| e.to_string()))
            .collect()
    } else {
        questions
            .iter()
            .map(|(pid, _)| {
                let item = unit.items.iter().find(|i| &i.persona_id == pid);
                Ok(match item {
                    Some(i) => format!("I still think: {} I am open to a version that keeps this idea while meeting the others halfway.", i.opinion),
                    None => "I am open to the other suggestions.".to_string(),
                })
            })
            .collect()
    };
    let mut out = d.clone();
    let mut failures = Vec::new();
    let mut any = false;
    for ((pid, _), r) in questions.iter().zip(results) {
        match r {
            Ok(a) => {
                any = true;
                out.push(Speaker::Persona(pid.clone()), RoleTag::Answer, a, None);
            }
            Err(e) => {
                tracing::warn!(persona = %pid, error = %e, "answer omitted");
                failures.push((pid.clone(), e));
            }
        }
    }
    if !any {
        let msg = failures.iter().map(|(p, e)| format!("{p}: {e}")).collect::<Vec<_>>().join("; ");
        return Err(DiscussionError::NoAnswers(msg));
    }
    out.failed_answers = failures.into_iter().map(|(p, _)| p).collect();
    out.state = next;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ConclusionReply {
    pub target: String,
    pub summary: String,
    pub preview: RawPreview,
    /// What the moderator says to close the round; defaults to the summary.
    #[serde(default)]
    pub statement: Option<String>,
    #[serde(default)]
    pub omitted_personas: Vec<String>,
}

impl ResponseSchema for ConclusionReply {
    const SCHEMA_ID: &'static str = TAG_CONCLUDE;

    fn check(&self) -> Result<(), String> {
        if self.summary.trim().is_empty() {
            return Err("`summary` is empty".into());
        }
        Ok(())
    }
}

fn preview_for(kind: FeedbackKind, raw: &RawPreview) -> Result<Preview, String> {
    match (kind, raw.clone()) {
        (FeedbackKind::Text, RawPreview::Line(text)) => Ok(Preview::Text { text }),
        (FeedbackKind::Image, RawPreview::Line(description)) => Ok(Preview::Image { description }),
        (FeedbackKind::Theme, RawPreview::Theme { tone, color }) => Ok(Preview::Theme { tone, color }),
        (k, _) => Err(format!("{k} conclusion has a preview of the wrong shape")),
    }
}

/// Synthesizes the round's conclusion, checks it with the same structural
/// rules as feedback, and marks the unit resolved.
pub fn conclude(
    gw: &Gateway,
    d: &Discussion,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    extract: &BriefExtract,
    doc: &CanvasDocument,
) -> Result<(Discussion, FeedbackUnit), DiscussionError> {
    let next = d.require(Operation::Conclude)?;
    let questioned: Vec<String> = d.current_questions().iter().filter_map(|t| t.to.clone()).collect();
    let answers: Vec<String> = d
        .transcript
        .iter()
        .filter(|t| t.round == d.rounds_used && t.role_tag == RoleTag::Answer)
        .map(|t| match &t.speaker {
            Speaker::Persona(p) => format!("- {p}: {}", t.text),
            _ => format!("- {}", t.text),
        })
        .collect();
    let (conclusion, statement) = if gw.has_chat() {
        let req = ModelRequest::new(TAG_CONCLUDE, ConclusionReply::SCHEMA_ID)
            .system(format!(
                "You are the moderator. Draw a conclusion from the panel's answers that accommodates each persona \
                 while satisfying the user's comments. You may leave out a persona's view when it cannot be \
                 reconciled; list those personas in omitted_personas. The conclusion has the same structure as \
                 feedback: the component id, a one-line summary, and a preview ({}).\n{JSON_ONLY}\n\
                 Shape: {{\"target\": str, \"summary\": str, \"preview\": ..., \"statement\": str, \"omitted_personas\": [str]}}",
                match unit.kind {
                    FeedbackKind::Text => "the full replacement text",
                    FeedbackKind::Image => "a one-line description of the image to generate",
                    FeedbackKind::Theme => "{\"tone\": str, \"color\": str}",
                }
            ))
            .text(grounding(extract))
            .text(discussion_context(d, unit, set))
            .text(format!("Answers this round:\n{}", answers.join("\n")))
            .temperature(0.4);
        let check = |r: &ConclusionReply| -> Result<(), String> {
            if r.target != unit.target {
                return Err(format!("conclusion must target `{}`, not `{}`", unit.target, r.target));
            }
            let p = preview_for(unit.kind, &r.preview)?;
            check_target(doc, &r.target, unit.kind, &p).map_err(|v| v.to_string())?;
            if let Some(o) = r.omitted_personas.iter().find(|o| !questioned.contains(o)) {
                return Err(format!("omitted persona `{o}` was not part of this round"));
            }
            Ok(())
        };
        let (reply, _) = gw.complete::<ConclusionReply>(&req, &check)?;
        let preview = preview_for(unit.kind, &reply.preview).map_err(DiscussionError::Invalid)?;
        let mut omitted = reply.omitted_personas.clone();
        let statement = reply
            .statement
            .as_deref()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .unwrap_or(reply.summary.trim())
            .to_string();
        for f in &d.failed_answers {
            if !omitted.contains(f) {
                omitted.push(f.clone());
            }
        }
        (
            Conclusion {
                target: unit.target.clone(),
                summary: one_line(&reply.summary),
                preview,
                omitted_personas: omitted,
            },
            statement,
        )
    } else {
        heuristic_conclusion(d, unit, set, &questioned)?
    };
    check_target(doc, &conclusion.target, unit.kind, &conclusion.preview).map_err(|v| DiscussionError::Invalid(v.to_string()))?;
    let mut out = d.clone();
    out.push(Speaker::Moderator, RoleTag::ConclusionStatement, statement, None);
    out.conclusion = Some(conclusion.clone());
    out.state = next;
    let mut u = unit.clone();
    u.status = UnitStatus::Resolved;
    u.conclusion = Some(conclusion);
    Ok((out, u))
}

fn heuristic_conclusion(
    d: &Discussion,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    questioned: &[String],
) -> Result<(Conclusion, String), DiscussionError> {
    let answered: Vec<&String> = questioned.iter().filter(|p| !d.failed_answers.contains(p)).collect();
    let lead = answered.first().ok_or_else(|| DiscussionError::NoAnswers("nobody answered".into()))?;
    let item: &FeedbackItem = unit
        .items
        .iter()
        .find(|i| &&i.persona_id == lead)
        .ok_or_else(|| DiscussionError::Invalid(format!("persona `{lead}` has no item in this unit")))?;
    let name = set.get(lead).map(|p| p.name.as_str()).unwrap_or(lead.as_str());
    let omitted: Vec<String> = questioned.iter().filter(|p| p != lead).cloned().collect();
    let summary = format!("Go with {name}'s suggestion for the {}: {}", unit.kind, one_line(&item.opinion));
    Ok((
        Conclusion {
            target: unit.target.clone(),
            summary: summary.clone(),
            preview: item.preview.clone(),
            omitted_personas: omitted,
        },
        summary,
    ))
}

/// Runs questioning, answering and concluding back to back from a state
/// that has a comment (or its absence) recorded.
pub fn advance(
    gw: &Gateway,
    d: &Discussion,
    unit: &FeedbackUnit,
    set: &PersonaSet,
    extract: &BriefExtract,
    doc: &CanvasDocument,
) -> Result<(Discussion, FeedbackUnit), DiscussionError> {
    let mut cur = d.clone();
    if cur.state == DiscussionState::AwaitingComment {
        cur = submit_comment(&cur, None)?;
    }
    if cur.state == DiscussionState::Questioning {
        cur = ask_questions(gw, &cur, unit, set, extract)?;
    }
    if cur.state == DiscussionState::Answering {
        cur = collect_answers(gw, &cur, unit, set, extract)?;
    }
    conclude(gw, &cur, unit, set, extract, doc)
}

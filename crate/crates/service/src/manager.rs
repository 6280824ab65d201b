//! Session commands. Each session has one writer (a mutex around its log);
//! readers take the current immutable state without blocking on it.
//! Commands are synchronous and may call the model, so async callers run
//! them on a blocking thread.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::broadcast;

use posterpanel::canvas::document_from_value;
use posterpanel::discussion::{self, Discussion, DiscussionError, DiscussionState};
use posterpanel::feedback::{FeedbackKind, ThemeDescriptor};
use posterpanel::gateway::{AssetRef, GatewayError};
use posterpanel::persona::{self, BriefPage, MarketingBrief, PersonaDetails, PersonaError};
use posterpanel::theme::{self, RankedTemplates, TemplateIndex, ThemeError};
use posterpanel::{CanvasDocument, Gateway};

use crate::config::ServiceConfig;
use crate::pipeline::{self, PipelineError};
use crate::session::{self, EventPayload, EventRecord, Session, SessionStatus, Snapshot};
use crate::store::{self, SessionLog, StoreError};

pub const ARCHIVE_FORMAT: &str = "posterpanel-session";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    /// The request does not fit the current state.
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{0}")]
    Upstream(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        ServiceError::Conflict {
            code,
            message: message.into(),
        }
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Exists(id) => ServiceError::conflict("exists", format!("session `{id}` already exists")),
            StoreError::InvalidId(_) | StoreError::Replay(_) => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<GatewayError> for ServiceError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(m) => ServiceError::BadRequest(m),
            other => ServiceError::Upstream(other.to_string()),
        }
    }
}

impl From<DiscussionError> for ServiceError {
    fn from(e: DiscussionError) -> Self {
        match e {
            DiscussionError::State { .. } => ServiceError::conflict("state", e.to_string()),
            DiscussionError::RoundLimit(_) => ServiceError::conflict("round-limit", e.to_string()),
            DiscussionError::NoConflict(_) => ServiceError::conflict("no-conflict", e.to_string()),
            DiscussionError::Invalid(m) => ServiceError::BadRequest(m),
            DiscussionError::NoAnswers(_) => ServiceError::Upstream(e.to_string()),
            DiscussionError::Gateway(g) => g.into(),
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownRef(_) => ServiceError::NotFound(e.to_string()),
            PipelineError::NotApplicable { .. } => ServiceError::conflict("not-applicable", e.to_string()),
            PipelineError::TemplateRequired => ServiceError::BadRequest(e.to_string()),
            PipelineError::Discussion(d) => d.into(),
            PipelineError::Feedback(f) => match f {
                posterpanel::feedback::FeedbackError::Gateway(g) => g.into(),
                other => ServiceError::conflict("not-applicable", other.to_string()),
            },
            PipelineError::Theme(t) => match t {
                ThemeError::Gateway(g) => g.into(),
                other => ServiceError::Internal(other.to_string()),
            },
        }
    }
}

impl From<PersonaError> for ServiceError {
    fn from(e: PersonaError) -> Self {
        match e {
            PersonaError::Gateway(g) => g.into(),
            other => ServiceError::BadRequest(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

/// A brief page as uploaded: text, or a base64 PNG scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PageUpload {
    Text { text: String },
    Png { png_base64: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BriefUpload {
    pub source_name: Option<String>,
    /// Shorthand for a single text page.
    pub text: Option<String>,
    pub pages: Vec<PageUpload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub brief: BriefUpload,
    /// Canvas JSON of the draft poster.
    pub draft: Value,
}

/// Template documents with their embedding index.
pub struct TemplateLibrary {
    pub index: TemplateIndex,
    pub documents: BTreeMap<String, CanvasDocument>,
}

impl TemplateLibrary {
    /// Loads `index` if given, otherwise embeds the corpus in `dir`.
    pub fn load(gw: &Gateway, dir: &Path, index: Option<&Path>) -> std::result::Result<Self, ThemeError> {
        match index {
            Some(path) => {
                let index = TemplateIndex::load(path)?;
                let (documents, warnings) = theme::load_corpus(dir)?;
                for w in warnings {
                    tracing::warn!("{w}");
                }
                if let Some((id, _)) = index.entries.iter().find(|(id, _)| !documents.contains_key(id)) {
                    return Err(ThemeError::UnknownTemplate(id.clone()));
                }
                Ok(TemplateLibrary { index, documents })
            }
            None => {
                let report = theme::ingest_templates(gw, dir)?;
                for w in &report.warnings {
                    tracing::warn!("{w}");
                }
                let documents = report.templates.into_iter().map(|t| (t.template_id, t.document)).collect();
                Ok(TemplateLibrary {
                    index: report.index,
                    documents,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub format: String,
    pub version: u32,
    pub session: Session,
    pub events: Vec<EventRecord>,
    /// PNG bytes (base64) of every asset the session references.
    pub assets: BTreeMap<String, String>,
}

pub struct SessionHandle {
    events_path: PathBuf,
    writer: Mutex<SessionLog>,
    state: RwLock<Arc<Session>>,
    events: broadcast::Sender<EventRecord>,
}

impl SessionHandle {
    fn new(log: SessionLog, state: Session) -> Self {
        let (events, _) = broadcast::channel(256);
        SessionHandle {
            events_path: log.dir().join("events.jsonl"),
            writer: Mutex::new(log),
            state: RwLock::new(Arc::new(state)),
            events,
        }
    }

    pub fn state(&self) -> Arc<Session> {
        self.state.read().expect("state lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<EventRecord> {
        self.events.subscribe()
    }

    /// Durably appends, folds into the state, then publishes.
    fn commit(&self, log: &mut SessionLog, payloads: Vec<EventPayload>) -> Result<Arc<Session>> {
        let current = self.state();
        let records = log.append(&current.session_id, payloads)?;
        let mut next = (*current).clone();
        for r in &records {
            next = session::apply(&next, r).map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        let next = Arc::new(next);
        *self.state.write().expect("state lock") = next.clone();
        if let Err(e) = log.maybe_snapshot(&next) {
            tracing::warn!(error = %e, "snapshot failed");
        }
        for r in records {
            let _ = self.events.send(r);
        }
        Ok(next)
    }
}

pub struct SessionManager {
    config: ServiceConfig,
    gateway: Arc<Gateway>,
    sessions_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    templates: Option<TemplateLibrary>,
}

impl SessionManager {
    /// Opens the data directory and reloads every stored session.
    pub fn open(config: ServiceConfig, gateway: Arc<Gateway>, templates: Option<TemplateLibrary>) -> Result<Self> {
        let sessions_dir = config.data_dir.join("sessions");
        std::fs::create_dir_all(&sessions_dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", sessions_dir.display())))?;
        let mut sessions = HashMap::new();
        for dir in store::list_sessions(&sessions_dir)? {
            match SessionLog::open(&dir) {
                Ok((log, state)) => {
                    sessions.insert(state.session_id.clone(), Arc::new(SessionHandle::new(log, state)));
                }
                Err(e) => tracing::error!(dir = %dir.display(), error = %e, "skipping unreadable session"),
            }
        }
        Ok(SessionManager {
            config,
            gateway,
            sessions_dir,
            sessions: RwLock::new(sessions),
            templates,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn templates(&self) -> Option<&TemplateLibrary> {
        self.templates.as_ref()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("sessions lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Sessions whose pipeline has not finished, e.g. after a restart.
    pub fn unsettled(&self) -> Vec<String> {
        self.session_ids()
            .into_iter()
            .filter(|id| self.handle(id).map(|h| !h.state().status.is_settled()).unwrap_or(false))
            .collect()
    }

    pub fn handle(&self, id: &str) -> Result<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session `{id}`")))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>> {
        Ok(self.handle(id)?.state())
    }

    fn brief_from_upload(&self, up: &BriefUpload) -> Result<MarketingBrief> {
        let mut pages = Vec::new();
        if let Some(t) = &up.text {
            pages.push(BriefPage::Text(t.clone()));
        }
        for (i, p) in up.pages.iter().enumerate() {
            match p {
                PageUpload::Text { text } => pages.push(BriefPage::Text(text.clone())),
                PageUpload::Png { png_base64 } => {
                    let bytes = B64
                        .decode(png_base64.trim())
                        .map_err(|e| ServiceError::BadRequest(format!("brief page {}: {e}", i + 1)))?;
                    let img = posterpanel::gateway::decode_png(&bytes)
                        .map_err(|e| ServiceError::BadRequest(format!("brief page {}: {e}", i + 1)))?;
                    pages.push(BriefPage::Image(self.gateway.assets().put(&img)?));
                }
            }
        }
        let brief = MarketingBrief {
            pages,
            source_name: up.source_name.clone().unwrap_or_else(|| "brief".into()),
        };
        brief.validate()?;
        Ok(brief)
    }

    /// Stores the uploads and writes the `created` event. The pipeline runs
    /// separately via [`SessionManager::run_pipeline`].
    pub fn create_session(&self, req: &CreateSession) -> Result<String> {
        let brief = self.brief_from_upload(&req.brief)?;
        let document = document_from_value(&req.draft).map_err(|e| ServiceError::BadRequest(format!("draft: {e}")))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.insert_new(&id, brief, document)?;
        Ok(id)
    }

    fn insert_new(&self, id: &str, brief: MarketingBrief, document: CanvasDocument) -> Result<()> {
        let (log, state) = SessionLog::create(
            &self.sessions_dir,
            id,
            EventPayload::Created {
                brief,
                document,
                max_rounds: self.config.max_rounds,
            },
        )?;
        let handle = Arc::new(SessionHandle::new(log, state));
        self.sessions.write().expect("sessions lock").insert(id.to_string(), handle);
        Ok(())
    }

    /// Runs the remaining stages: panel construction, then feedback with
    /// conflict detection. A failing stage is recorded as a `failed` event.
    pub fn run_pipeline(&self, id: &str) -> Result<Arc<Session>> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        loop {
            let s = h.state();
            let (stage, outcome) = match &s.status {
                SessionStatus::Created => (
                    "personas",
                    persona::construct_panel(&self.gateway, &s.brief)
                        .map(|(extract, personas)| EventPayload::PersonasReady { extract, personas })
                        .map_err(|e| e.to_string()),
                ),
                SessionStatus::PersonasReady => {
                    let (extract, set) = (s.extract.as_ref().expect("ready"), s.personas.as_ref().expect("ready"));
                    (
                        "feedback",
                        pipeline::review(&self.gateway, s.document(), set, extract)
                            .map(|r| EventPayload::FeedbackReady {
                                items: r.items,
                                failures: r.failures,
                                units: r.units,
                                conflicts: r.conflicts,
                            })
                            .map_err(|e| e.to_string()),
                    )
                }
                _ => return Ok(s),
            };
            let payload = outcome.unwrap_or_else(|message| {
                tracing::error!(session = id, stage, %message, "pipeline stage failed");
                EventPayload::Failed {
                    stage: stage.into(),
                    message,
                }
            });
            h.commit(&mut log, vec![payload])?;
        }
    }

    fn require_ready(s: &Session) -> Result<()> {
        match &s.status {
            SessionStatus::FeedbackReady => Ok(()),
            other => Err(ServiceError::conflict(
                "not-ready",
                format!("session is not ready for this ({})", serde_json::to_value(other).map(|v| v["state"].to_string()).unwrap_or_default()),
            )),
        }
    }

    pub fn add_persona(&self, id: &str, details: PersonaDetails) -> Result<Arc<Session>> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        let s = h.state();
        let set = s
            .personas
            .as_ref()
            .ok_or_else(|| ServiceError::conflict("not-ready", "personas are not ready yet"))?;
        let next = persona::add_manual_persona(&self.gateway, set, details)?;
        let added = next.personas.last().expect("appended").clone();
        h.commit(&mut log, vec![EventPayload::PersonaAdded { persona: added }])
    }

    pub fn manual_edit(&self, id: &str, document: &Value) -> Result<Snapshot> {
        let doc = document_from_value(document).map_err(|e| ServiceError::BadRequest(format!("document: {e}")))?;
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        let s = h.commit(&mut log, vec![EventPayload::ManualEdit { document: doc }])?;
        Ok(s.history.last().expect("snapshot").clone())
    }

    /// Applies an item or conclusion. Accepting a ref again returns the
    /// snapshot it produced the first time.
    pub fn accept(&self, id: &str, reference: &str, template_id: Option<&str>) -> Result<Snapshot> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        let s = h.state();
        if let Some(&i) = s.accepted.get(reference) {
            return Ok(s.history[i].clone());
        }
        Self::require_ready(&s)?;
        let r = pipeline::resolve_ref(reference, &s.units, s.discussions.values(), s.document())?;
        let template = match (r.kind, template_id) {
            (FeedbackKind::Theme, Some(tid)) => {
                let lib = self
                    .templates
                    .as_ref()
                    .ok_or_else(|| ServiceError::conflict("no-templates", "no template library is configured"))?;
                let doc = lib
                    .documents
                    .get(tid)
                    .ok_or_else(|| ServiceError::NotFound(format!("unknown template `{tid}`")))?;
                Some((tid, doc))
            }
            _ => None,
        };
        let applied = pipeline::apply_resolved(&self.gateway, s.document(), &r, template, theme::DEFAULT_OVERLAP_ROUNDS)?;
        let payload = match applied.template_id {
            Some(template_id) => EventPayload::ThemeApplied {
                reference: r.reference.clone(),
                unit_id: r.unit_id.clone(),
                template_id,
                document: applied.document,
            },
            None => EventPayload::Accepted {
                reference: r.reference.clone(),
                unit_id: r.unit_id.clone(),
                document: applied.document,
            },
        };
        let s = h.commit(&mut log, vec![payload])?;
        Ok(s.history.last().expect("snapshot").clone())
    }

    /// Ranks templates for a theme item or conclusion, or for an explicit
    /// descriptor.
    pub fn rank_themes(&self, id: &str, reference: Option<&str>, descriptor: Option<ThemeDescriptor>, k: Option<usize>) -> Result<RankedTemplates> {
        let s = self.get(id)?;
        let lib = self
            .templates
            .as_ref()
            .ok_or_else(|| ServiceError::conflict("no-templates", "no template library is configured"))?;
        let descriptor = match (reference, descriptor) {
            (Some(r), _) => {
                Self::require_ready(&s)?;
                let res = pipeline::resolve_ref(r, &s.units, s.discussions.values(), s.document())?;
                res.preview
                    .descriptor()
                    .ok_or_else(|| ServiceError::BadRequest(format!("`{r}` is not theme feedback")))?
            }
            (None, Some(d)) => d,
            (None, None) => return Err(ServiceError::BadRequest("give a `ref` or a `tone` and `color`".into())),
        };
        let k = k.unwrap_or(self.config.k);
        theme::query_templates(&self.gateway, &lib.index, &descriptor, k).map_err(|e| match e {
            ThemeError::Gateway(g) => g.into(),
            ThemeError::InvalidK => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        })
    }

    pub fn open_discussion(&self, id: &str, unit_id: &str) -> Result<Discussion> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        let s = h.state();
        Self::require_ready(&s)?;
        let unit = s.unit(unit_id).ok_or_else(|| ServiceError::NotFound(format!("unknown unit `{unit_id}`")))?;
        let report = s
            .conflicts
            .get(unit_id)
            .ok_or_else(|| ServiceError::conflict("no-conflict", format!("unit `{unit_id}` has no conflict to discuss")))?;
        if let Some(d) = s.discussions.get(unit_id) {
            if d.state != DiscussionState::Concluded {
                return Err(ServiceError::conflict(
                    "in-progress",
                    format!("discussion {} on `{unit_id}` is still {}", d.discussion_id, d.state),
                ));
            }
        }
        let d = discussion::open_discussion(unit, report, format!("d{}", s.discussions_opened + 1), s.max_rounds)?;
        let events = session::discussion_events(0, &d, unit, unit);
        h.commit(&mut log, events)?;
        Ok(d)
    }

    pub fn discussion(&self, id: &str, unit_id: &str) -> Result<Discussion> {
        let s = self.get(id)?;
        s.discussions
            .get(unit_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no discussion on `{unit_id}`")))
    }

    pub fn comment(&self, id: &str, unit_id: &str, comment: Option<&str>) -> Result<Discussion> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        let s = h.state();
        let d = s
            .discussions
            .get(unit_id)
            .ok_or_else(|| ServiceError::NotFound(format!("no discussion on `{unit_id}`")))?;
        let unit = s.unit(unit_id).expect("discussed unit exists");
        let next = discussion::submit_comment(d, comment)?;
        let events = session::discussion_events(d.transcript.len(), &next, unit, unit);
        h.commit(&mut log, events)?;
        Ok(next)
    }

    /// Drives questioning, answering and concluding, committing after each
    /// step so a failure keeps the turns already produced.
    pub fn advance(&self, id: &str, unit_id: &str) -> Result<Discussion> {
        let h = self.handle(id)?;
        let mut log = h.writer.lock().expect("writer lock");
        loop {
            let s = h.state();
            let d = s
                .discussions
                .get(unit_id)
                .ok_or_else(|| ServiceError::NotFound(format!("no discussion on `{unit_id}`")))?;
            let unit = s.unit(unit_id).expect("discussed unit exists");
            let set = s.personas.as_ref().expect("ready");
            let extract = s.extract.as_ref().expect("ready");
            let (next, unit_after) = match d.state {
                DiscussionState::AwaitingComment => (discussion::submit_comment(d, None)?, unit.clone()),
                DiscussionState::Questioning => (discussion::ask_questions(&self.gateway, d, unit, set, extract)?, unit.clone()),
                DiscussionState::Answering => (discussion::collect_answers(&self.gateway, d, unit, set, extract)?, unit.clone()),
                DiscussionState::Concluding => discussion::conclude(&self.gateway, d, unit, set, extract, s.document())?,
                DiscussionState::Concluded => {
                    return Err(ServiceError::conflict(
                        "state",
                        "discussion is concluded; comment to start another round",
                    ))
                }
            };
            let events = session::discussion_events(d.transcript.len(), &next, unit, &unit_after);
            h.commit(&mut log, events)?;
            if next.state == DiscussionState::Concluded {
                return Ok(next);
            }
        }
    }

    /// Logged events with `seq > after`, in order.
    pub fn events_after(&self, id: &str, after: u64) -> Result<Vec<EventRecord>> {
        let h = self.handle(id)?;
        let (events, _) = store::read_events(&h.events_path)?;
        Ok(events.into_iter().filter(|e| e.seq > after).collect())
    }

    fn asset_refs(s: &Session) -> Vec<AssetRef> {
        let mut refs = Vec::new();
        for p in &s.brief.pages {
            if let BriefPage::Image(r) = p {
                refs.push(r.clone());
            }
        }
        if let Some(set) = &s.personas {
            refs.extend(set.personas.iter().map(|p| p.avatar.clone()));
        }
        for snap in &s.history {
            for e in snap.document.elements() {
                if let Some(r) = e.image_source().and_then(AssetRef::parse) {
                    refs.push(r);
                }
            }
        }
        refs.sort_by(|a, b| a.as_str().cmp(b.as_str()));
        refs.dedup();
        refs
    }

    pub fn export(&self, id: &str) -> Result<Archive> {
        let s = self.get(id)?;
        let events = self.events_after(id, 0)?;
        let mut assets = BTreeMap::new();
        for r in Self::asset_refs(&s) {
            if let Some(bytes) = self.gateway.assets().png_bytes(&r) {
                assets.insert(r.to_string(), B64.encode(bytes));
            }
        }
        Ok(Archive {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            session: (*s).clone(),
            events,
            assets,
        })
    }

    /// Recreates an exported session under its original id.
    pub fn import(&self, archive: &Archive) -> Result<String> {
        if archive.format != ARCHIVE_FORMAT || archive.version != ARCHIVE_VERSION {
            return Err(ServiceError::BadRequest(format!(
                "unsupported archive {} v{}",
                archive.format, archive.version
            )));
        }
        let replayed = session::replay(&archive.events).map_err(|e| ServiceError::BadRequest(format!("archive events: {e}")))?;
        if replayed != archive.session {
            return Err(ServiceError::BadRequest("archive session does not match its events".into()));
        }
        for (r, b64) in &archive.assets {
            let r = AssetRef::parse(r).ok_or_else(|| ServiceError::BadRequest(format!("bad asset ref `{r}`")))?;
            let bytes = B64.decode(b64).map_err(|e| ServiceError::BadRequest(format!("asset {r}: {e}")))?;
            self.gateway.assets().import_png(&r, &bytes)?;
        }
        let id = archive.session.session_id.clone();
        if self.sessions.read().expect("sessions lock").contains_key(&id) {
            return Err(ServiceError::conflict("exists", format!("session `{id}` already exists")));
        }
        let (log, state) = SessionLog::import(&self.sessions_dir, &archive.events)?;
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id.clone(), Arc::new(SessionHandle::new(log, state)));
        Ok(id)
    }
}

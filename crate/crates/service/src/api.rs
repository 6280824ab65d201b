//! HTTP + JSON routes and the server-sent event stream.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | POST | `/sessions` | `{"brief": {...}, "draft": <canvas>}` |
//! | POST | `/sessions/import` | archive from `/export` |
//! | GET | `/sessions` | ids |
//! | GET | `/sessions/{id}` | full state |
//! | GET | `/sessions/{id}/status` \| `personas` \| `units` \| `document` \| `history` | |
//! | POST | `/sessions/{id}/personas` | eight persona fields |
//! | POST | `/sessions/{id}/accept` | `{"ref": str, "template_id": str?}` |
//! | POST | `/sessions/{id}/manual-edit` | canvas document |
//! | POST | `/sessions/{id}/themes` | `{"ref": str}` or `{"tone", "color"}`, `?k=` |
//! | GET, POST | `/sessions/{id}/units/{uid}/discussion` | open on POST |
//! | POST | `/sessions/{id}/units/{uid}/comment` | `{"comment": str?}` |
//! | POST | `/sessions/{id}/units/{uid}/advance` | |
//! | GET | `/sessions/{id}/events` | `?after=seq`, `Last-Event-ID`, `?follow=false` |
//! | GET | `/sessions/{id}/export` | |
//! | GET | `/assets/{sha256}.png` | |
//! | GET | `/templates/{tid}/preview.png` | |
//!
//! Errors are `{"error": code, "message": str}` with 400 (malformed input),
//! 404 (unknown session, unit, ref), 409 (wrong state), 502 (model failure).

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use posterpanel::canvas::{rasterize_with, serialize_document};
use posterpanel::feedback::ThemeDescriptor;
use posterpanel::gateway::{encode_png, AssetRef};
use posterpanel::persona::PersonaDetails;

use crate::manager::{Archive, CreateSession, ServiceError, SessionManager};
use crate::session::EventRecord;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad-request"),
            ServiceError::Conflict { code, .. } => (StatusCode::CONFLICT, *code),
            ServiceError::Upstream(_) => (StatusCode::BAD_GATEWAY, "model-failure"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({"error": code, "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs a manager command on the blocking pool.
async fn blocking<T, F>(mgr: &Arc<SessionManager>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&SessionManager) -> Result<T, ServiceError> + Send + 'static,
{
    let mgr = mgr.clone();
    tokio::task::spawn_blocking(move || f(&mgr))
        .await
        .map_err(|e| ApiError(ServiceError::Internal(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError(ServiceError::BadRequest(format!("invalid JSON body: {e}"))))
}

pub fn router(mgr: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"ok": true})) }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/personas", get(personas).post(add_persona))
        .route("/sessions/{id}/units", get(units))
        .route("/sessions/{id}/document", get(document))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/manual-edit", post(manual_edit))
        .route("/sessions/{id}/themes", post(themes))
        .route("/sessions/{id}/units/{uid}/discussion", get(get_discussion).post(open_discussion))
        .route("/sessions/{id}/units/{uid}/comment", post(comment))
        .route("/sessions/{id}/units/{uid}/discussion/comment", post(comment))
        .route("/sessions/{id}/units/{uid}/advance", post(advance))
        .route("/sessions/{id}/units/{uid}/discussion/advance", post(advance))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/export", get(export))
        .route("/assets/{file}", get(asset))
        .route("/templates/{tid}/preview.png", get(template_preview))
        .with_state(mgr)
}

async fn create_session(State(mgr): State<Arc<SessionManager>>, body: axum::body::Bytes) -> ApiResult<Response> {
    let req: CreateSession = json_body(&body)?;
    let id = blocking(&mgr, move |m| m.create_session(&req)).await?;
    let (m, run_id) = (mgr.clone(), id.clone());
    tokio::task::spawn_blocking(move || {
        if let Err(e) = m.run_pipeline(&run_id) {
            tracing::error!(session = %run_id, error = %e, "pipeline aborted");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"session_id": id}))).into_response())
}

async fn list_sessions(State(mgr): State<Arc<SessionManager>>) -> Json<Value> {
    Json(json!({"sessions": mgr.session_ids()}))
}

async fn import_session(State(mgr): State<Arc<SessionManager>>, body: axum::body::Bytes) -> ApiResult<Response> {
    let archive: Archive = json_body(&body)?;
    let id = blocking(&mgr, move |m| m.import(&archive)).await?;
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))).into_response())
}

async fn session_state(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(mgr.get(&id)?.as_ref()).into_response())
}

async fn status(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = mgr.get(&id)?;
    Ok(Json(json!({
        "session_id": s.session_id,
        "status": s.status,
        "last_seq": s.last_seq,
        "snapshots": s.history.len(),
        "units": s.units.len(),
        "discussions": s.discussions.len(),
    })))
}

async fn personas(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = mgr.get(&id)?;
    match &s.personas {
        Some(p) => Ok(Json(p).into_response()),
        None => Err(ServiceError::Conflict {
            code: "not-ready",
            message: "personas are not ready yet".into(),
        }
        .into()),
    }
}

async fn add_persona(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let details: PersonaDetails = json_body(&body)?;
    let s = blocking(&mgr, move |m| m.add_persona(&id, details)).await?;
    Ok((StatusCode::CREATED, Json(s.personas.clone())).into_response())
}

async fn units(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = mgr.get(&id)?;
    Ok(Json(json!({"units": s.units, "failures": s.failures})))
}

async fn document(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = mgr.get(&id)?;
    let index = s.history.len() - 1;
    Ok((
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::HeaderName::from_static("x-snapshot-index"), index.to_string()),
        ],
        serialize_document(s.document()),
    )
        .into_response())
}

async fn history(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = mgr.get(&id)?;
    Ok(Json(&s.history).into_response())
}

#[derive(Deserialize)]
struct AcceptBody {
    #[serde(rename = "ref")]
    reference: String,
    #[serde(default)]
    template_id: Option<String>,
}

async fn accept(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let b: AcceptBody = json_body(&body)?;
    let snap = blocking(&mgr, move |m| m.accept(&id, &b.reference, b.template_id.as_deref())).await?;
    Ok(Json(snap).into_response())
}

async fn manual_edit(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult<Response> {
    let doc: Value = json_body(&body)?;
    let snap = blocking(&mgr, move |m| m.manual_edit(&id, &doc)).await?;
    Ok(Json(snap).into_response())
}

#[derive(Deserialize)]
struct ThemesBody {
    #[serde(rename = "ref", default)]
    reference: Option<String>,
    #[serde(default)]
    tone: Option<String>,
    #[serde(default)]
    color: Option<String>,
}

#[derive(Deserialize)]
struct KQuery {
    k: Option<usize>,
}

async fn themes(
    State(mgr): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    Query(q): Query<KQuery>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let b: ThemesBody = json_body(&body)?;
    let descriptor = match (b.tone, b.color) {
        (Some(tone), Some(color)) => Some(ThemeDescriptor { tone, color }),
        _ => None,
    };
    let ranked = blocking(&mgr, move |m| m.rank_themes(&id, b.reference.as_deref(), descriptor, q.k)).await?;
    Ok(Json(ranked).into_response())
}

async fn get_discussion(State(mgr): State<Arc<SessionManager>>, Path((id, uid)): Path<(String, String)>) -> ApiResult<Response> {
    Ok(Json(mgr.discussion(&id, &uid)?).into_response())
}

async fn open_discussion(State(mgr): State<Arc<SessionManager>>, Path((id, uid)): Path<(String, String)>) -> ApiResult<Response> {
    let d = blocking(&mgr, move |m| m.open_discussion(&id, &uid)).await?;
    Ok((StatusCode::CREATED, Json(d)).into_response())
}

#[derive(Deserialize, Default)]
struct CommentBody {
    #[serde(default)]
    comment: Option<String>,
}

async fn comment(
    State(mgr): State<Arc<SessionManager>>,
    Path((id, uid)): Path<(String, String)>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let b: CommentBody = if body.is_empty() { CommentBody::default() } else { json_body(&body)? };
    let d = blocking(&mgr, move |m| m.comment(&id, &uid, b.comment.as_deref())).await?;
    Ok(Json(d).into_response())
}

async fn advance(State(mgr): State<Arc<SessionManager>>, Path((id, uid)): Path<(String, String)>) -> ApiResult<Response> {
    let d = blocking(&mgr, move |m| m.advance(&id, &uid)).await?;
    Ok(Json(d).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
    follow: Option<bool>,
}

fn sse_event(ev: &EventRecord) -> Event {
    Event::default()
        .id(ev.seq.to_string())
        .event(ev.payload.kind())
        .data(serde_json::to_string(ev).expect("event serializes"))
}

struct Follow {
    mgr: Arc<SessionManager>,
    id: String,
    rx: tokio::sync::broadcast::Receiver<EventRecord>,
    last: u64,
    pending: VecDeque<EventRecord>,
}

/// Logged events after the cursor, then live ones. The subscription is
/// taken before the backlog is read and duplicates are dropped by seq, so
/// a reconnecting client sees every event exactly once.
async fn events(
    State(mgr): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let handle = mgr.handle(&id)?;
    let from_header = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok());
    let after = q.after.or(from_header).unwrap_or(0);
    let rx = handle.subscribe();
    let backlog = {
        let id = id.clone();
        blocking(&mgr, move |m| m.events_after(&id, after)).await?
    };
    let last = backlog.last().map(|e| e.seq).unwrap_or(after);
    let head = stream::iter(backlog.iter().map(sse_event).map(Ok).collect::<Vec<_>>());
    let tail = if q.follow.unwrap_or(true) {
        let state = Follow {
            mgr: mgr.clone(),
            id,
            rx,
            last,
            pending: VecDeque::new(),
        };
        stream::unfold(state, |mut st| async move {
            loop {
                if let Some(ev) = st.pending.pop_front() {
                    if ev.seq > st.last {
                        st.last = ev.seq;
                        return Some((Ok(sse_event(&ev)), st));
                    }
                    continue;
                }
                match st.rx.recv().await {
                    Ok(ev) => st.pending.push_back(ev),
                    Err(RecvError::Lagged(_)) => {
                        let (m, id, after) = (st.mgr.clone(), st.id.clone(), st.last);
                        match tokio::task::spawn_blocking(move || m.events_after(&id, after)).await {
                            Ok(Ok(evs)) => st.pending.extend(evs),
                            _ => return None,
                        }
                    }
                    Err(RecvError::Closed) => return None,
                }
            }
        })
        .boxed()
    } else {
        stream::empty().boxed()
    };
    Ok(Sse::new(head.chain(tail)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

async fn export(State(mgr): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    let archive = blocking(&mgr, move |m| m.export(&id)).await?;
    Ok(Json(archive).into_response())
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn asset(State(mgr): State<Arc<SessionManager>>, Path(file): Path<String>) -> ApiResult<Response> {
    let digest = file.strip_suffix(".png").unwrap_or(&file);
    let r = AssetRef::parse(&format!("asset:{digest}")).ok_or_else(|| ServiceError::NotFound(format!("no asset `{file}`")))?;
    let bytes = mgr
        .gateway()
        .assets()
        .png_bytes(&r)
        .ok_or_else(|| ServiceError::NotFound(format!("no asset `{file}`")))?;
    Ok(png_response(bytes))
}

async fn template_preview(State(mgr): State<Arc<SessionManager>>, Path(tid): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(&mgr, move |m| {
        let doc = m
            .templates()
            .and_then(|l| l.documents.get(&tid))
            .ok_or_else(|| ServiceError::NotFound(format!("unknown template `{tid}`")))?;
        let img = rasterize_with(doc, m.gateway().assets()).map_err(|e| ServiceError::Internal(e.to_string()))?;
        encode_png(&img).map_err(|e| ServiceError::Internal(e.to_string()))
    })
    .await?;
    Ok(png_response(bytes))
}

/// Serves until ctrl-c. Sessions whose pipeline was interrupted resume in
/// the background.
pub async fn serve(mgr: Arc<SessionManager>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    for id in mgr.unsettled() {
        let m = mgr.clone();
        tokio::task::spawn_blocking(move || {
            tracing::info!(session = %id, "resuming pipeline");
            if let Err(e) = m.run_pipeline(&id) {
                tracing::error!(session = %id, error = %e, "pipeline aborted");
            }
        });
    }
    axum::serve(listener, router(mgr))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

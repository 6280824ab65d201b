//! Per-session persistence under a data directory:
//!
//! ```text
//! <data_dir>/assets/<sha256>.png
//! <data_dir>/sessions/<session_id>/events.jsonl   one EventRecord per line
//! <data_dir>/sessions/<session_id>/snapshot.json  {"seq": n, "session": {...}}
//! ```
//!
//! Every append is flushed with `fsync` before the call returns. A torn
//! final line (a crash mid-write) is dropped and truncated on open; damage
//! anywhere else is an error. Snapshots only speed up opening: the log
//! alone is authoritative.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{self, EventPayload, EventRecord, ReplayError, Session};

/// A snapshot is written after this many events since the last one.
pub const SNAPSHOT_EVERY: u64 = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("corrupt event log {path} at line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("session `{0}` already exists")]
    Exists(String),
    #[error("invalid session id `{0}`")]
    InvalidId(String),
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    seq: u64,
    session: Session,
}

/// Session ids become directory names.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Reads every intact event. Returns the events and the byte length of the
/// intact prefix.
pub fn read_events(path: &Path) -> Result<(Vec<EventRecord>, u64), StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut good_len = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            tracing::warn!(path = %path.display(), line = lineno, "dropping torn final event");
            break;
        }
        match serde_json::from_str::<EventRecord>(line.trim_end()) {
            Ok(ev) => {
                events.push(ev);
                good_len += n as u64;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: lineno,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok((events, good_len))
}

/// An open session log, owned by the session's single writer.
pub struct SessionLog {
    dir: PathBuf,
    file: File,
    next_seq: u64,
    since_snapshot: u64,
}

impl SessionLog {
    fn events_path(dir: &Path) -> PathBuf {
        dir.join("events.jsonl")
    }

    /// Creates the directory and writes the `created` event.
    pub fn create(sessions_dir: &Path, session_id: &str, created: EventPayload) -> Result<(Self, Session), StoreError> {
        if !valid_session_id(session_id) {
            return Err(StoreError::InvalidId(session_id.to_string()));
        }
        let dir = sessions_dir.join(session_id);
        if dir.exists() {
            return Err(StoreError::Exists(session_id.to_string()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = Self::events_path(&dir);
        let file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut log = SessionLog {
            dir,
            file,
            next_seq: 1,
            since_snapshot: 0,
        };
        let rec = log.append(session_id, vec![created])?;
        let s = session::genesis(&rec[0])?;
        Ok((log, s))
    }

    /// Writes a complete imported log.
    pub fn import(sessions_dir: &Path, events: &[EventRecord]) -> Result<(Self, Session), StoreError> {
        let first = events.first().ok_or(ReplayError::MissingCreated)?;
        let session = session::replay(events)?;
        if !valid_session_id(&first.session_id) {
            return Err(StoreError::InvalidId(first.session_id.clone()));
        }
        let dir = sessions_dir.join(&first.session_id);
        if dir.exists() {
            return Err(StoreError::Exists(first.session_id.clone()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = Self::events_path(&dir);
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut buf = Vec::new();
        for ev in events {
            serde_json::to_writer(&mut buf, ev).expect("event serializes");
            buf.push(b'\n');
        }
        file.write_all(&buf).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        let mut log = SessionLog {
            dir,
            file,
            next_seq: session.last_seq + 1,
            since_snapshot: 0,
        };
        log.write_snapshot(&session)?;
        Ok((log, session))
    }

    /// Reopens a session: loads the snapshot if usable, then replays the
    /// events after it.
    pub fn open(dir: &Path) -> Result<(Self, Session), StoreError> {
        let path = Self::events_path(dir);
        let (events, good_len) = read_events(&path)?;
        let on_disk = fs::metadata(&path).map_err(io_err(&path))?.len();
        if good_len < on_disk {
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            f.set_len(good_len).map_err(io_err(&path))?;
            f.sync_all().map_err(io_err(&path))?;
        }
        let snap: Option<SnapshotFile> = fs::read(dir.join("snapshot.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .filter(|s: &SnapshotFile| events.iter().any(|e| e.seq == s.seq));
        let session = match snap {
            Some(s) => events
                .iter()
                .filter(|e| e.seq > s.seq)
                .try_fold(s.session, |acc, ev| session::apply(&acc, ev))?,
            None => session::replay(&events)?,
        };
        let file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        Ok((
            SessionLog {
                dir: dir.to_path_buf(),
                file,
                next_seq: session.last_seq + 1,
                since_snapshot: 0,
            },
            session,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends `payloads` as consecutive events in one durable write.
    pub fn append(&mut self, session_id: &str, payloads: Vec<EventPayload>) -> Result<Vec<EventRecord>, StoreError> {
        let path = Self::events_path(&self.dir);
        let mut buf = Vec::new();
        let mut records = Vec::with_capacity(payloads.len());
        for payload in payloads {
            let rec = EventRecord {
                seq: self.next_seq,
                session_id: session_id.to_string(),
                payload,
            };
            self.next_seq += 1;
            serde_json::to_writer(&mut buf, &rec).expect("event serializes");
            buf.push(b'\n');
            records.push(rec);
        }
        self.file.write_all(&buf).map_err(io_err(&path))?;
        self.file.sync_data().map_err(io_err(&path))?;
        self.since_snapshot += records.len() as u64;
        Ok(records)
    }

    /// Writes a snapshot when enough events accumulated since the last.
    pub fn maybe_snapshot(&mut self, state: &Session) -> Result<(), StoreError> {
        if self.since_snapshot >= SNAPSHOT_EVERY {
            self.write_snapshot(state)?;
        }
        Ok(())
    }

    pub fn write_snapshot(&mut self, state: &Session) -> Result<(), StoreError> {
        let path = self.dir.join("snapshot.json");
        let tmp = self.dir.join("snapshot.json.tmp");
        let body = serde_json::to_vec(&SnapshotFile {
            seq: state.last_seq,
            session: state.clone(),
        })
        .expect("session serializes");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&body).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.since_snapshot = 0;
        Ok(())
    }
}

/// Session directories under `sessions_dir`, sorted.
pub fn list_sessions(sessions_dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if !sessions_dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(sessions_dir)
        .map_err(io_err(sessions_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("events.jsonl").is_file())
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use posterpanel::persona::MarketingBrief;
    use posterpanel::{CanvasDocument, Element};

    fn created() -> EventPayload {
        EventPayload::Created {
            brief: MarketingBrief::from_text("b", "Goal: x"),
            document: CanvasDocument::new(50, 50, vec![Element::text("t", 0.0, 0.0, 10.0, 10.0, "hi")]).unwrap(),
            max_rounds: 5,
        }
    }

    fn edit(s: &Session) -> EventPayload {
        EventPayload::ManualEdit {
            document: s.document().clone(),
        }
    }

    #[test]
    fn append_reopen_and_torn_tail() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut log, mut s) = SessionLog::create(tmp.path(), "s1", created()).unwrap();
        for _ in 0..3 {
            let recs = log.append("s1", vec![edit(&s)]).unwrap();
            s = session::apply(&s, &recs[0]).unwrap();
        }
        drop(log);
        let dir = tmp.path().join("s1");
        let path = dir.join("events.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":5,\"session_id\":\"s1\",\"kind\":\"man").unwrap();
        drop(f);
        let (mut log, again) = SessionLog::open(&dir).unwrap();
        assert_eq!(again, s);
        let recs = log.append("s1", vec![edit(&s)]).unwrap();
        assert_eq!(recs[0].seq, 5);
        let (events, _) = read_events(&path).unwrap();
        assert_eq!(events.len(), 5);
    }

    #[test]
    fn snapshot_and_log_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut log, mut s) = SessionLog::create(tmp.path(), "s2", created()).unwrap();
        for _ in 0..(SNAPSHOT_EVERY + 3) {
            let recs = log.append("s2", vec![edit(&s)]).unwrap();
            s = session::apply(&s, &recs[0]).unwrap();
            log.maybe_snapshot(&s).unwrap();
        }
        let dir = tmp.path().join("s2");
        assert!(dir.join("snapshot.json").is_file());
        let (_, from_snap) = SessionLog::open(&dir).unwrap();
        fs::remove_file(dir.join("snapshot.json")).unwrap();
        let (_, from_log) = SessionLog::open(&dir).unwrap();
        assert_eq!(from_snap, s);
        assert_eq!(from_log, s);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut log, s) = SessionLog::create(tmp.path(), "s3", created()).unwrap();
        log.append("s3", vec![edit(&s)]).unwrap();
        let path = tmp.path().join("s3/events.jsonl");
        let body = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("garbage\n{body}")).unwrap();
        assert!(matches!(SessionLog::open(&tmp.path().join("s3")), Err(StoreError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn ids_are_checked() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(SessionLog::create(tmp.path(), "../x", created()), Err(StoreError::InvalidId(_))));
        SessionLog::create(tmp.path(), "dup", created()).unwrap();
        assert!(matches!(SessionLog::create(tmp.path(), "dup", created()), Err(StoreError::Exists(_))));
    }
}

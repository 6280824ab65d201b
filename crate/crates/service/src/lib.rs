//! Stateful session API over the posterpanel engines: an event-sourced
//! session store, the pipeline stages shared with the batch CLI, and the
//! HTTP + server-sent-events front end.

pub mod api;
pub mod config;
pub mod manager;
pub mod pipeline;
pub mod session;
pub mod store;

pub use config::{build_gateway, BackendSpec, ConfigError, ServiceConfig};
pub use manager::{Archive, CreateSession, ServiceError, SessionManager, TemplateLibrary};
pub use session::{EventPayload, EventRecord, Session, SessionStatus};

//! Audience-driven design feedback for advertisement posters.
//!
//! A marketing brief seeds a panel of four persona agents laid out on a 2×2
//! grid of steerable audience dimensions. Each agent critiques the text,
//! image, and theme of a poster document; conflicting feedback is reconciled
//! through a moderated discussion; accepted edits are applied back to the
//! document.
//!
//! Modules, bottom-up:
//!
//! - [`canvas`]: the poster document model, canonical JSON form, geometry,
//!   and a box-level rasterizer.
//! - [`gateway`]: structured chat completion, text-to-image, and image
//!   embedding behind one interface, with live and scripted backends.
//! - [`persona`]: brief extraction, dimension elicitation, persona grid.
//! - [`feedback`]: per-persona feedback, guardrails, units, application.
//! - [`theme`]: template index, cosine ranking, theme application.
//! - [`discussion`]: conflict detection and the moderated discussion.

pub mod canvas;
pub mod discussion;
pub mod feedback;
pub mod gateway;
pub mod persona;
mod prompt;
pub mod theme;

pub use canvas::{CanvasDocument, CanvasError, Element, ElementKind};
pub use gateway::{Gateway, GatewayError};

//! Local classification service and command-line front end for the
//! `wastesort` engine. Inference runs in-process; nothing leaves the host.

pub mod api;
pub mod cli;
pub mod config;
pub mod server;

pub use api::{classify_bytes, ClassifyError, ClassifyResponse, LabelConfidence, MAX_UPLOAD_BYTES};
pub use config::ServiceConfig;
pub use server::{router, serve, AppState};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
struct ServiceChapter;

//! HTTP front end for the governance engine.
//!
//! Agents call `/v1/tasks/{task}/propose` before every action and execute it
//! only on Pass. Mutating requests travel in a [`WireEnvelope`] whose
//! `request_id` makes retries safe.

pub mod app;
pub mod auth;
pub mod error;
pub mod idempotency;
pub mod wire;

pub use app::{router, AppState, ServiceConfig, REPLAY_HEADER};
pub use auth::{Scope, Tokens};
pub use error::{ApiError, ErrorBody};
pub use wire::{WireEnvelope, API_VERSION};

use std::future::Future;
use std::sync::Arc;

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

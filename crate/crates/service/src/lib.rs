//! HTTP front end for live retrieval sessions.
//!
//! | Method | Path | |
//! |--------|------|-|
//! | POST | `/v1/bundles` | register a manifest with inline embeddings |
//! | GET | `/v1/bundles/{id}` | regions and image uri, without embeddings |
//! | POST | `/v1/sessions` | start a session, returns the Turn-0 view |
//! | POST | `/v1/sessions/{id}/feedback` | apply one feedback event |
//! | GET | `/v1/sessions/{id}` | current view plus the transcript so far |
//!
//! Errors come back as `{"code": ..., "message": ...}`.

mod api;
mod error;
mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use intentrank_core::session::SessionConfig;

pub use api::{
    BundleSummary, BundleView, ConfigOverrides, CreateSession, FeedbackRequest, PresentedRegion, QueryInput,
    RegionView, SessionDetail, SessionView,
};
pub use error::ApiError;
pub use store::AppState;

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Session defaults; requests may override individual fields.
    pub defaults: SessionConfig,
    /// Directory for append-only per-session event logs.
    pub persist_dir: Option<PathBuf>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/bundles", post(api::register_bundle))
        .route("/v1/bundles/{id}", get(api::get_bundle))
        .route("/v1/sessions", post(api::create_session))
        .route("/v1/sessions/{id}", get(api::get_session))
        .route("/v1/sessions/{id}/feedback", post(api::post_feedback))
        .with_state(state)
}

pub fn app(config: ServiceConfig) -> std::io::Result<Router> {
    Ok(router(Arc::new(AppState::new(config)?)))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let app = app(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

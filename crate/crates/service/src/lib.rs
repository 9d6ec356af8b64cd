//! HTTP API over the analysis pipeline.
//!
//! | Method | Path | Body | Reply |
//! |---|---|---|---|
//! | GET | `/healthz` | | `{"status": "ok", "cdrs", "sessions"}` |
//! | GET | `/v1/registry` | | `[{"id", "name", "description"}]` |
//! | POST | `/v1/analyze` | `{"note", "note_meta"?, "overrides"?}` | session |
//! | GET | `/v1/sessions/{id}` | | session |
//! | POST | `/v1/sessions/{id}/variables` | `{"cdr_id", "values": {name: literal}}` | session |
//!
//! A session reply is the serialized [`AnalysisSession`]. Errors carry
//! `{"error": {"code", "message", "field"?}}` with a 4xx status; a rejected
//! variable resolution leaves the session as it was.

mod error;
pub mod store;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use cdr_agent::{AnalysisSession, NoteMeta, Overrides, Pipeline};
use serde::{Deserialize, Serialize};

pub use error::{ApiError, ErrorBody};
pub use store::{SessionStore, StoreError};

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    store: Arc<SessionStore>,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, store: Arc<SessionStore>) -> Self {
        AppState { pipeline, store }
    }

    pub fn store(&self) -> &Arc<SessionStore> {
        &self.store
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRequest {
    pub note: String,
    #[serde(default)]
    pub note_meta: NoteMeta,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolveRequest {
    pub cdr_id: String,
    pub values: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: String,
    pub name: String,
    pub description: String,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/registry", get(registry))
        .route("/v1/analyze", post(analyze))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/variables", post(resolve))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "cdrs": state.pipeline.registry().len(),
        "sessions": state.store.len(),
    }))
}

async fn registry(State(state): State<AppState>) -> Json<Vec<RegistryEntry>> {
    let entries = state
        .pipeline
        .registry()
        .definitions()
        .iter()
        .map(|d| RegistryEntry {
            id: d.id.clone(),
            name: d.name.clone(),
            description: d.description.clone(),
        })
        .collect();
    Json(entries)
}

async fn analyze(
    State(state): State<AppState>,
    body: Result<Json<AnalyzeRequest>, JsonRejection>,
) -> Result<Json<AnalysisSession>, ApiError> {
    let Json(req) = body?;
    let config = state.pipeline.config().apply(&req.overrides)?;
    let session = state
        .pipeline
        .analyze_with(&req.note, &req.note_meta, &config)
        .await?;
    tracing::info!(
        session_id = %session.session_id,
        status = ?session.status,
        selected = session.selected().len(),
        "analysis finished"
    );
    state.store.insert(session.clone());
    Ok(Json(session))
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<AnalysisSession>, ApiError> {
    let handle = state.store.get(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let session = handle.lock().await.clone();
    Ok(Json(session))
}

async fn resolve(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ResolveRequest>, JsonRejection>,
) -> Result<Json<AnalysisSession>, ApiError> {
    let handle = state.store.get(&id).ok_or_else(|| ApiError::unknown_session(&id))?;
    let Json(req) = body?;
    let mut session = handle.lock().await;
    state
        .pipeline
        .resolve_variables(&mut session, &req.cdr_id, &req.values)?;
    state.store.record(&session);
    tracing::info!(session_id = %id, cdr_id = %req.cdr_id, status = ?session.status, "variables resolved");
    Ok(Json(session.clone()))
}

/// Serve `state` on `listener` until `shutdown` resolves, dropping expired
/// sessions every `sweep_every`. In-flight requests are allowed to finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    sweep_every: Duration,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let store = state.store.clone();
    let sweeper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(sweep_every);
        loop {
            tick.tick().await;
            let dropped = store.sweep();
            if dropped > 0 {
                tracing::debug!(dropped, "expired sessions removed");
            }
        }
    });
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            tracing::error!(error = %e, "cannot listen for Ctrl-C");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                tracing::error!(error = %e, "cannot listen for SIGTERM");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

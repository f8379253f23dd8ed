//! HTTP query service.
//!
//! | method | path               | body                          |
//! |--------|--------------------|-------------------------------|
//! | POST   | `/v1/query`        | query request → ranked images |
//! | POST   | `/v1/debug/boxes`  | query request → token boxes   |
//! | GET    | `/v1/images/{id}`  | 256×256 PNG                   |
//! | GET    | `/v1/healthz`      | readiness                     |
//! | GET    | `/v1/meta`         | effective configuration       |
//!
//! Every route except health answers 503 until [`ServiceState::set_ready`] runs.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mqir_core::data::Scene;
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::config::RunConfig;
use crate::engine::{QueryEngine, QueryError, QueryRequest};
use crate::render::scene_png;

pub struct Ready {
    pub engine: QueryEngine,
    pub scenes: HashMap<String, Scene>,
    pub config: RunConfig,
}

pub struct ServiceState {
    ready: OnceLock<Ready>,
    started: Instant,
}

impl Default for ServiceState {
    fn default() -> Self {
        Self { ready: OnceLock::new(), started: Instant::now() }
    }
}

impl ServiceState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Publishes the loaded state. Later calls are ignored.
    pub fn set_ready(&self, ready: Ready) {
        let _ = self.ready.set(ready);
    }

    pub fn is_ready(&self) -> bool {
        self.ready.get().is_some()
    }
}

fn error(status: StatusCode, msg: impl Into<String>, field: Option<&str>) -> Response {
    let mut body = json!({ "error": msg.into() });
    if let Some(f) = field {
        body["field"] = Value::from(f);
    }
    (status, Json(body)).into_response()
}

fn not_ready() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "service is loading", None)
}

fn query_error(e: QueryError) -> Response {
    match &e {
        QueryError::BadField { field, .. } => error(StatusCode::BAD_REQUEST, e.to_string(), Some(field)),
        QueryError::BadJson(_) => error(StatusCode::BAD_REQUEST, e.to_string(), None),
        QueryError::EmptyCaption => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), Some("caption")),
        QueryError::Internal(_) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    }
}

async fn query(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let start = Instant::now();
    let Some(ready) = state.ready.get() else {
        return not_ready();
    };
    let req = match QueryRequest::from_json(&body) {
        Ok(r) => r,
        Err(e) => return query_error(e),
    };
    match ready.engine.query(&req) {
        Ok(outcome) => {
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            Json(outcome.into_response(&ready.engine.model_id, elapsed)).into_response()
        }
        Err(e) => query_error(e),
    }
}

async fn debug_boxes(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let Some(ready) = state.ready.get() else {
        return not_ready();
    };
    match QueryRequest::from_json(&body).and_then(|req| ready.engine.boxes(&req)) {
        Ok(b) => Json(b).into_response(),
        Err(e) => query_error(e),
    }
}

async fn image(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Response {
    let Some(ready) = state.ready.get() else {
        return not_ready();
    };
    match ready.scenes.get(&id) {
        Some(scene) => ([(header::CONTENT_TYPE, "image/png")], scene_png(scene)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown image {id}"), None),
    }
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Response {
    let uptime = state.started.elapsed().as_secs_f64();
    match state.ready.get() {
        Some(ready) => Json(json!({
            "status": "ok",
            "model_id": ready.engine.model_id,
            "index_size": ready.engine.index.len(),
            "uptime_s": uptime,
        }))
        .into_response(),
        None => {
            (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading", "uptime_s": uptime }))).into_response()
        }
    }
}

async fn meta(State(state): State<Arc<ServiceState>>) -> Response {
    let Some(ready) = state.ready.get() else {
        return not_ready();
    };
    let e = &ready.engine;
    Json(json!({
        "model_id": e.model_id,
        "model": e.model.config,
        "config": ready.config,
        "index": {
            "size": e.index.len(),
            "dim": e.index.dim(),
            "provenance": e.index.provenance,
        },
        "vocab_size": e.vocab.len(),
        "t_p": e.t_p,
        "s_p": e.s_p,
    }))
    .into_response()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/debug/boxes", post(debug_boxes))
        .route("/v1/images/{id}", get(image))
        .route("/v1/healthz", get(healthz))
        .route("/v1/meta", get(meta))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

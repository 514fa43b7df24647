//! Loopback wire protocol for ingest.
//!
//! * `POST /v1/batches` takes a canonical [`BatchEnvelope`] JSON body and
//!   answers `{"batch_id","status","accepted","duplicates"}`. Status 200 for
//!   `ok`, 422 for a well-formed but invalid batch, 400 for an unparsable body.
//! * `GET /v1/health` answers `{"status":"ok"}`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use super::{IngestError, IngestSink, StagingStore};
use crate::protocol::{Ack, BatchEnvelope};
use crate::server::{self, ServerHandle};

pub fn router(store: Arc<StagingStore>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/batches", post(post_batch))
        .with_state(store)
}

async fn post_batch(State(store): State<Arc<StagingStore>>, body: Bytes) -> (StatusCode, Json<Ack>) {
    let env: BatchEnvelope = match serde_json::from_slice(&body) {
        Ok(env) => env,
        Err(_) => {
            // Echo whatever batch id is recoverable from the raw body.
            let batch_id = serde_json::from_slice::<Value>(&body)
                .ok()
                .and_then(|v| v.get("batch_id").and_then(Value::as_str).map(str::to_string))
                .unwrap_or_default();
            return (StatusCode::BAD_REQUEST, Json(Ack::reject(batch_id)));
        }
    };
    let result = tokio::task::spawn_blocking(move || store.submit_batch(&env)).await;
    match result {
        Ok(Ok(ack)) if ack.is_ok() => (StatusCode::OK, Json(ack)),
        Ok(Ok(ack)) => (StatusCode::UNPROCESSABLE_ENTITY, Json(ack)),
        Ok(Err(_)) | Err(_) => (StatusCode::INTERNAL_SERVER_ERROR, Json(Ack::reject(""))),
    }
}

/// Serves `store` on `addr` (port 0 picks a free port).
pub fn serve(addr: SocketAddr, store: Arc<StagingStore>) -> std::io::Result<ServerHandle> {
    server::spawn(addr, router(store))
}

/// Blocking client for the ingest endpoint.
#[derive(Clone)]
pub struct HttpIngestClient {
    agent: ureq::Agent,
    base: String,
}

impl HttpIngestClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { agent, base: base_url.trim_end_matches('/').to_string() }
    }

    pub fn health(&self) -> Result<Value, IngestError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/health", self.base))
            .call()
            .map_err(|e| IngestError::Transport(e.to_string()))?;
        let text = resp.body_mut().read_to_string().map_err(|e| IngestError::Transport(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| IngestError::Transport(e.to_string()))
    }

    /// Posts a raw body; returns the status code and parsed ack.
    pub fn post_raw(&self, body: &str) -> Result<(u16, Ack), IngestError> {
        let mut resp = self
            .agent
            .post(format!("{}/v1/batches", self.base))
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| IngestError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| IngestError::Transport(e.to_string()))?;
        let ack = serde_json::from_str(&text).map_err(|e| IngestError::Transport(format!("bad ack `{text}`: {e}")))?;
        Ok((status, ack))
    }
}

impl IngestSink for HttpIngestClient {
    fn submit(&self, env: &BatchEnvelope) -> Result<Ack, IngestError> {
        let body = serde_json::to_string(env).expect("envelopes serialize");
        let (status, ack) = self.post_raw(&body)?;
        if status >= 500 {
            return Err(IngestError::Transport(format!("server error {status}")));
        }
        Ok(ack)
    }
}

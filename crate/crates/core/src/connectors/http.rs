//! Loopback HTTP face of a mock vendor cloud.
//!
//! * `POST /oauth/token` with form fields `client_id`, `client_secret`
//!   (and optionally `grant_type=client_credentials`) answers
//!   `{"access_token","token_type":"Bearer","expires_in"}`; 401 on bad
//!   credentials.
//! * `GET /v1/events?since=<id>&limit=<n>` with `Authorization: Bearer <token>`
//!   answers a JSON array of events; 401 on a bad or expired token, 400 on a
//!   non-positive limit.
//!
//! The server validates tokens against the cloud's own clock, which the
//! owner of the shared [`ThirdPartyCloud`] advances.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{BearerToken, CloudApi, CloudEvent, ConnectorError, ThirdPartyCloud};
use crate::server::{self, ServerHandle};

pub type SharedCloud = Arc<Mutex<ThirdPartyCloud>>;

#[derive(Deserialize)]
struct TokenForm {
    client_id: String,
    client_secret: String,
    #[serde(default)]
    grant_type: Option<String>,
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    limit: i64,
}

pub fn router(cloud: SharedCloud) -> Router {
    Router::new().route("/oauth/token", post(token)).route("/v1/events", get(events)).with_state(cloud)
}

fn error(status: StatusCode, code: &str, detail: String) -> Response {
    (status, Json(json!({"error": code, "error_description": detail}))).into_response()
}

async fn token(State(cloud): State<SharedCloud>, Form(form): Form<TokenForm>) -> Response {
    if form.grant_type.as_deref().is_some_and(|g| g != "client_credentials") {
        return error(StatusCode::BAD_REQUEST, "unsupported_grant_type", "only client_credentials".into());
    }
    let mut c = cloud.lock().expect("cloud lock poisoned");
    match c.issue_token(&form.client_id, &form.client_secret) {
        Ok(t) => {
            let expires_in = (t.expiry_ms - c.now_ms()) / 1000;
            Json(json!({"access_token": t.access_token, "token_type": "Bearer", "expires_in": expires_in})).into_response()
        }
        Err(e) => error(StatusCode::UNAUTHORIZED, "invalid_client", e.to_string()),
    }
}

async fn events(State(cloud): State<SharedCloud>, headers: HeaderMap, Query(q): Query<EventsQuery>) -> Response {
    let Some(token) = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
    else {
        return error(StatusCode::UNAUTHORIZED, "invalid_token", "missing bearer token".into());
    };
    let c = cloud.lock().expect("cloud lock poisoned");
    match c.events_since(token, q.since, q.limit) {
        Ok((page, _)) => Json(page).into_response(),
        Err(ConnectorError::Auth(m)) => error(StatusCode::UNAUTHORIZED, "invalid_token", m),
        Err(e) => error(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
    }
}

pub fn serve(addr: SocketAddr, cloud: SharedCloud) -> std::io::Result<ServerHandle> {
    server::spawn(addr, router(cloud))
}

/// Blocking [`CloudApi`] client for the HTTP mock cloud.
pub struct HttpCloudClient {
    agent: ureq::Agent,
    base: String,
}

impl HttpCloudClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { agent, base: base_url.trim_end_matches('/').to_string() }
    }
}

fn transport(e: impl std::fmt::Display) -> ConnectorError {
    ConnectorError::Transport(e.to_string())
}

fn describe(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.get("error_description").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

impl CloudApi for HttpCloudClient {
    fn token_exchange(&mut self, client_id: &str, client_secret: &str, now_ms: i64) -> Result<BearerToken, ConnectorError> {
        let mut resp = self
            .agent
            .post(format!("{}/oauth/token", self.base))
            .send_form([("grant_type", "client_credentials"), ("client_id", client_id), ("client_secret", client_secret)])
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        match status {
            200 => {
                let v: Value = serde_json::from_str(&body).map_err(transport)?;
                let access_token = v["access_token"].as_str().ok_or_else(|| transport("missing access_token"))?.to_string();
                let expires_in = v["expires_in"].as_i64().ok_or_else(|| transport("missing expires_in"))?;
                Ok(BearerToken { access_token, expiry_ms: now_ms + expires_in * 1000 })
            }
            401 => Err(ConnectorError::Auth(describe(&body))),
            s => Err(transport(format!("token endpoint answered {s}: {body}"))),
        }
    }

    fn fetch_since(&mut self, token: &str, cursor: u64, limit: i64, _now_ms: i64) -> Result<(Vec<CloudEvent>, u64), ConnectorError> {
        let mut resp = self
            .agent
            .get(format!("{}/v1/events", self.base))
            .query("since", cursor.to_string())
            .query("limit", limit.to_string())
            .header("authorization", format!("Bearer {token}"))
            .call()
            .map_err(transport)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        match status {
            200 => {
                let page: Vec<CloudEvent> = serde_json::from_str(&body).map_err(transport)?;
                let next = page.last().map_or(cursor, |e| e.event_id);
                Ok((page, next))
            }
            401 => Err(ConnectorError::Auth(describe(&body))),
            400 => Err(ConnectorError::Validation(describe(&body))),
            s => Err(transport(format!("events endpoint answered {s}: {body}"))),
        }
    }
}

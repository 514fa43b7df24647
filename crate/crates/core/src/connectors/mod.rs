//! Vendor-cloud connectors for the motion sensor and the sleep mattress.
//!
//! A [`ThirdPartyCloud`] holds time-ordered events with increasing ids and
//! hands out short-lived bearer tokens. A [`Poller`] exchanges credentials,
//! pages through new events by cursor, converts them to samples (the event
//! id becomes the sample seq) and submits them to ingest. The cursor is
//! persisted only after ingest acks, so a crash in between causes a refetch
//! that ingest dedups.
//!
//! Event JSON:
//!
//! ```json
//! {"event_id":7,"t_ms":1672650000000}
//! {"event_id":1,"start_ms":1672644600000,"end_ms":1672677000000,"total_sleep_s":28000,
//!  "deep_sleep_s":6000,"avg_hr_bpm":55.2,"snoring_s":900}
//! ```

pub mod http;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::ingest::{IngestError, IngestSink};
use crate::model::{DeviceId, DeviceKind, Payload, SensorSample, SleepSummary};
use crate::protocol::{envelope_order, BatchEnvelope};

pub const DEFAULT_TOKEN_TTL_MS: i64 = 3_600_000;

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("auth error: {0}")]
    Auth(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("event {event_id}: {reason}")]
    Conversion { event_id: u64, reason: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad connector state at {path}: {reason}")]
    State { path: PathBuf, reason: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("injected crash after ack of {0}")]
    InjectedCrash(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudKind {
    Motion,
    Sleep,
}

impl CloudKind {
    pub fn device_kind(self) -> DeviceKind {
        match self {
            Self::Motion => DeviceKind::Motion,
            Self::Sleep => DeviceKind::Sleep,
        }
    }

    pub fn of_device(kind: DeviceKind) -> Option<Self> {
        match kind {
            DeviceKind::Motion => Some(Self::Motion),
            DeviceKind::Sleep => Some(Self::Sleep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudEvent {
    pub event_id: u64,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BearerToken {
    pub access_token: String,
    pub expiry_ms: i64,
}

impl BearerToken {
    pub fn is_valid_at(&self, now_ms: i64) -> bool {
        now_ms < self.expiry_ms
    }
}

/// The two calls a connector makes against a vendor cloud.
pub trait CloudApi {
    fn token_exchange(&mut self, client_id: &str, client_secret: &str, now_ms: i64) -> Result<BearerToken, ConnectorError>;
    fn fetch_since(&mut self, token: &str, cursor: u64, limit: i64, now_ms: i64) -> Result<(Vec<CloudEvent>, u64), ConnectorError>;
}

/// In-memory mock vendor cloud.
#[derive(Debug, Clone)]
pub struct ThirdPartyCloud {
    kind: CloudKind,
    events: Vec<CloudEvent>,
    credentials: BTreeMap<String, String>,
    tokens: BTreeMap<String, i64>,
    token_counter: u64,
    token_ttl_ms: i64,
    now_ms: i64,
}

impl ThirdPartyCloud {
    pub fn new(kind: CloudKind, token_ttl_ms: i64) -> Self {
        Self {
            kind,
            events: Vec::new(),
            credentials: BTreeMap::new(),
            tokens: BTreeMap::new(),
            token_counter: 0,
            token_ttl_ms,
            now_ms: i64::MIN,
        }
    }

    pub fn kind(&self) -> CloudKind {
        self.kind
    }

    pub fn register_client(&mut self, client_id: &str, client_secret: &str) {
        self.credentials.insert(client_id.to_string(), client_secret.to_string());
    }

    /// Advances the cloud clock; it never moves backwards.
    pub fn set_now(&mut self, now_ms: i64) {
        self.now_ms = self.now_ms.max(now_ms);
    }

    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn events(&self) -> &[CloudEvent] {
        &self.events
    }

    pub fn last_event_id(&self) -> u64 {
        self.events.last().map_or(0, |e| e.event_id)
    }

    pub fn push_event(&mut self, event: CloudEvent) -> Result<(), ConnectorError> {
        if event.event_id <= self.last_event_id() {
            return Err(ConnectorError::Validation(format!(
                "event id {} does not exceed {}",
                event.event_id,
                self.last_event_id()
            )));
        }
        self.events.push(event);
        Ok(())
    }

    /// Invalidates every issued token (e.g. a vendor-side key rotation).
    pub fn revoke_all_tokens(&mut self) {
        self.tokens.clear();
    }

    fn check_token(&self, token: &str) -> Result<(), ConnectorError> {
        match self.tokens.get(token) {
            Some(&expiry) if self.now_ms < expiry => Ok(()),
            Some(_) => Err(ConnectorError::Auth("token expired".into())),
            None => Err(ConnectorError::Auth("unknown token".into())),
        }
    }

    /// Issues a token valid for the configured lifetime from the cloud clock.
    pub fn issue_token(&mut self, client_id: &str, client_secret: &str) -> Result<BearerToken, ConnectorError> {
        if self.credentials.get(client_id).map(String::as_str) != Some(client_secret) {
            return Err(ConnectorError::Auth("invalid client credentials".into()));
        }
        self.token_counter += 1;
        let access_token = format!("{}-{client_id}-{}", self.kind_str(), self.token_counter);
        let expiry_ms = self.now_ms.saturating_add(self.token_ttl_ms);
        self.tokens.insert(access_token.clone(), expiry_ms);
        Ok(BearerToken { access_token, expiry_ms })
    }

    /// Up to `limit` events with id above `cursor`, oldest first.
    pub fn events_since(&self, token: &str, cursor: u64, limit: i64) -> Result<(Vec<CloudEvent>, u64), ConnectorError> {
        self.check_token(token)?;
        if limit <= 0 {
            return Err(ConnectorError::Validation(format!("limit must be positive, got {limit}")));
        }
        let from = self.events.partition_point(|e| e.event_id <= cursor);
        let page: Vec<CloudEvent> = self.events[from..].iter().take(limit as usize).cloned().collect();
        let next = page.last().map_or(cursor, |e| e.event_id);
        Ok((page, next))
    }

    fn kind_str(&self) -> &'static str {
        match self.kind {
            CloudKind::Motion => "motion",
            CloudKind::Sleep => "sleep",
        }
    }
}

impl CloudApi for ThirdPartyCloud {
    fn token_exchange(&mut self, client_id: &str, client_secret: &str, now_ms: i64) -> Result<BearerToken, ConnectorError> {
        self.set_now(now_ms);
        self.issue_token(client_id, client_secret)
    }

    fn fetch_since(&mut self, token: &str, cursor: u64, limit: i64, now_ms: i64) -> Result<(Vec<CloudEvent>, u64), ConnectorError> {
        self.set_now(now_ms);
        self.events_since(token, cursor, limit)
    }
}

/// The vendor-side event for a motion or sleep sample (inverse of [`convert_event`]).
pub fn event_from_sample(s: &SensorSample) -> Result<CloudEvent, ConnectorError> {
    let mut fields = Map::new();
    match &s.payload {
        Payload::MotionEvent => {
            fields.insert("t_ms".into(), s.t_ms.into());
        }
        Payload::SleepSession(p) => {
            let Value::Object(obj) = serde_json::to_value(p).expect("summaries serialize") else {
                unreachable!("a struct serializes to an object")
            };
            fields = obj;
        }
        other => {
            return Err(ConnectorError::Validation(format!("{} samples have no vendor cloud", other.modality())));
        }
    }
    Ok(CloudEvent { event_id: s.seq, fields })
}

/// Converts a vendor event to a sample of `device`, reusing the event id as seq.
pub fn convert_event(kind: CloudKind, device: &DeviceId, event: &CloudEvent) -> Result<SensorSample, ConnectorError> {
    let bad = |reason: String| ConnectorError::Conversion { event_id: event.event_id, reason };
    if device.kind() != kind.device_kind() {
        return Err(bad(format!("device {device} cannot carry {kind:?} events")));
    }
    let int = |name: &str| -> Result<i64, ConnectorError> {
        event.fields.get(name).and_then(Value::as_i64).ok_or_else(|| bad(format!("missing or non-integer `{name}`")))
    };
    let (t_ms, payload) = match kind {
        CloudKind::Motion => (int("t_ms")?, Payload::MotionEvent),
        CloudKind::Sleep => {
            let summary: SleepSummary =
                serde_json::from_value(Value::Object(event.fields.clone())).map_err(|e| bad(e.to_string()))?;
            (summary.end_ms, Payload::SleepSession(summary))
        }
    };
    Ok(SensorSample { device: device.clone(), seq: event.event_id, t_ms, payload })
}

/// Credentials and paging for one poller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub client_id: String,
    pub client_secret: String,
    pub page_limit: usize,
}

/// Persisted poller state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorState {
    /// Highest event id whose batch ingest has acked.
    pub cursor: u64,
    pub batch_counter: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollStats {
    pub fetched: usize,
    pub accepted: u64,
    pub duplicates: u64,
    pub batches: usize,
    /// Events that failed conversion; logged by id and passed over.
    pub skipped: Vec<u64>,
    pub reauthenticated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PollOutcome {
    NoNewData,
    Polled(PollStats),
    AuthFailed(String),
    Rejected { batch_id: String },
}

impl PollOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            Self::NoNewData => "no_new_data",
            Self::Polled(_) => "polled",
            Self::AuthFailed(_) => "auth_failed",
            Self::Rejected { .. } => "rejected",
        }
    }
}

/// Cursor-driven poller for one vendor cloud.
#[derive(Debug)]
pub struct Poller {
    device: DeviceId,
    kind: CloudKind,
    cfg: ConnectorConfig,
    state_path: PathBuf,
    state: ConnectorState,
    token: Option<BearerToken>,
    crash_after_ack: bool,
}

impl Poller {
    /// Opens the poller, loading persisted state from `state_path` if present.
    pub fn open(device: DeviceId, cfg: ConnectorConfig, state_path: &Path) -> Result<Self, ConnectorError> {
        let kind = CloudKind::of_device(device.kind())
            .ok_or_else(|| ConnectorError::Validation(format!("{device} is not a vendor-cloud device")))?;
        if cfg.page_limit == 0 {
            return Err(ConnectorError::Validation("page_limit must be positive".into()));
        }
        let state = match fs::read(state_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| ConnectorError::State { path: state_path.to_path_buf(), reason: e.to_string() })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => ConnectorState::default(),
            Err(source) => return Err(ConnectorError::Io { path: state_path.to_path_buf(), source }),
        };
        Ok(Self { device, kind, cfg, state_path: state_path.to_path_buf(), state, token: None, crash_after_ack: false })
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }

    pub fn state(&self) -> ConnectorState {
        self.state
    }

    /// Fault injection: fail right after the next ingest ack, before the
    /// cursor is persisted.
    pub fn set_crash_after_ack(&mut self, on: bool) {
        self.crash_after_ack = on;
    }

    fn persist(&self) -> Result<(), ConnectorError> {
        let io_err = |source| ConnectorError::Io { path: self.state_path.clone(), source };
        if let Some(dir) = self.state_path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = self.state_path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&self.state).expect("state serializes")).map_err(io_err)?;
        fs::rename(&tmp, &self.state_path).map_err(io_err)
    }

    fn fresh_token(&mut self, cloud: &mut dyn CloudApi, now_ms: i64) -> Result<String, ConnectorError> {
        let tok = cloud.token_exchange(&self.cfg.client_id, &self.cfg.client_secret, now_ms)?;
        let s = tok.access_token.clone();
        self.token = Some(tok);
        Ok(s)
    }

    /// Drains new events from `cloud` into `sink`, one batch per page.
    pub fn poll_once(&mut self, cloud: &mut dyn CloudApi, sink: &dyn IngestSink, now_ms: i64) -> Result<PollOutcome, ConnectorError> {
        let mut stats = PollStats::default();
        let mut token = match &self.token {
            Some(t) if t.is_valid_at(now_ms) => t.access_token.clone(),
            _ => match self.fresh_token(cloud, now_ms) {
                Ok(t) => t,
                Err(ConnectorError::Auth(msg)) => return Ok(PollOutcome::AuthFailed(msg)),
                Err(e) => return Err(e),
            },
        };
        let mut retried = false;
        loop {
            let (events, next_cursor) = match cloud.fetch_since(&token, self.state.cursor, self.cfg.page_limit as i64, now_ms) {
                Ok(page) => page,
                Err(ConnectorError::Auth(msg)) => {
                    if retried {
                        return Ok(PollOutcome::AuthFailed(msg));
                    }
                    retried = true;
                    stats.reauthenticated = true;
                    token = match self.fresh_token(cloud, now_ms) {
                        Ok(t) => t,
                        Err(ConnectorError::Auth(msg)) => return Ok(PollOutcome::AuthFailed(msg)),
                        Err(e) => return Err(e),
                    };
                    continue;
                }
                Err(e) => return Err(e),
            };
            if events.is_empty() {
                break;
            }
            stats.fetched += events.len();
            let mut samples = Vec::with_capacity(events.len());
            for ev in &events {
                match convert_event(self.kind, &self.device, ev) {
                    Ok(s) => samples.push(s),
                    Err(_) => stats.skipped.push(ev.event_id),
                }
            }
            if !samples.is_empty() {
                samples.sort_by_key(envelope_order);
                self.state.batch_counter += 1;
                self.persist()?;
                let batch_id = format!("{}#{}", self.device, self.state.batch_counter);
                let env = BatchEnvelope {
                    batch_id: batch_id.clone(),
                    origin: self.device.clone(),
                    relayed_by: None,
                    samples,
                    created_ms: now_ms,
                };
                let ack = sink.submit(&env)?;
                if !ack.is_ok() {
                    return Ok(PollOutcome::Rejected { batch_id });
                }
                stats.accepted += ack.accepted;
                stats.duplicates += ack.duplicates;
                stats.batches += 1;
                if self.crash_after_ack {
                    self.crash_after_ack = false;
                    return Err(ConnectorError::InjectedCrash(batch_id));
                }
            }
            self.state.cursor = next_cursor;
            self.persist()?;
        }
        Ok(if stats.fetched == 0 { PollOutcome::NoNewData } else { PollOutcome::Polled(stats) })
    }
}

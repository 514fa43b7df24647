//! Device-local buffer and the store-and-forward protocol.
//!
//! Samples are written to the durable log as they are recorded, sent in
//! batches at flush ticks, and deleted only once an ack for their batch
//! arrives (from the cloud, or from the phone for relayed watch data). Any
//! failure leaves rows in place for the next tick; the receiver dedups.

mod log;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

pub use self::log::{LogError, LogRecord};
use self::log::DurableLog;
use crate::model::{validate_sample, DeviceId, DeviceKind, Modality, Notification, Payload, SampleKey, SensorSample};
pub use crate::protocol::{Ack, AckStatus, BatchEnvelope, DEFAULT_MAX_BATCH};

pub const WEAR_NOTIFICATION_KIND: &str = "wear_watch";

/// Rewrite the log once it holds this many more records than live rows.
const COMPACT_SLACK: usize = 20_000;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{device}: {modality} seq regression, expected {expected}, got {got}")]
    SeqRegression { device: DeviceId, modality: Modality, expected: u64, got: u64 },
    #[error("{device}: {modality} seq gap, expected {expected}, got {got}")]
    SeqGap { device: DeviceId, modality: Modality, expected: u64, got: u64 },
    #[error("{device} cannot record a sample from {origin} outside a relay")]
    ForeignSample { device: DeviceId, origin: DeviceId },
    #[error("log at {path} belongs to {found}, not {expected}")]
    WrongDevice { path: String, expected: DeviceId, found: DeviceId },
    #[error("log at {0} has no header record")]
    MissingHeader(String),
    #[error("relay batch rejected: {0}")]
    BadRelay(String),
    #[error("{0} is not a phone")]
    NotPhone(DeviceId),
}

/// Result of recording one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordOutcome {
    Recorded,
    Duplicate,
    Quarantined(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quarantined {
    pub sample: SensorSample,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailReason {
    LinkDown,
    /// Request or ack lost; the rows stay and will be retransmitted.
    Timeout,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlushOutcome {
    Sent { batch_ids: Vec<String>, n: usize },
    NothingToSend,
    Failed(FailReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportError {
    LinkDown,
    DroppedRequest,
    DroppedAck,
}

/// A synchronous request/ack exchange over some link.
pub trait BatchTransport {
    fn send(&mut self, env: &BatchEnvelope) -> Result<Ack, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteDecision {
    Direct,
    Relay,
    Hold,
}

/// Watch routing: straight to the cloud when online, through the phone over
/// BLE otherwise, and hold when neither is reachable.
pub fn route_watch_flush(wan_up: bool, ble_up: bool) -> RouteDecision {
    match (wan_up, ble_up) {
        (true, _) => RouteDecision::Direct,
        (false, true) => RouteDecision::Relay,
        (false, false) => RouteDecision::Hold,
    }
}

/// Tracks whether watch data has reached the phone recently.
///
/// Armed monitors fire once when a check window is empty and re-arm when a
/// later window sees watch data again, so one contiguous gap produces one
/// notification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WearMonitor {
    seen: BTreeSet<i64>,
    armed: bool,
}

impl Default for WearMonitor {
    fn default() -> Self {
        Self { seen: BTreeSet::new(), armed: true }
    }
}

impl WearMonitor {
    pub fn observe(&mut self, t_ms: i64) {
        self.seen.insert(t_ms);
    }

    /// True when a notification is due for `[now - interval, now)`.
    pub fn check(&mut self, now_ms: i64, interval_ms: i64) -> bool {
        let from = now_ms - interval_ms;
        let any = self.seen.range(from..now_ms).next().is_some();
        self.seen = self.seen.split_off(&from);
        if any {
            self.armed = true;
            false
        } else if self.armed {
            self.armed = false;
            true
        } else {
            false
        }
    }

    fn last_seen_before(&self, now_ms: i64) -> Option<i64> {
        self.seen.range(..now_ms).next_back().copied()
    }
}

/// Rows are kept in `(t_ms, modality, device, seq)` order; for a single
/// origin that is the `(t_ms, modality, seq)` envelope order.
type RowKey = (i64, Modality, DeviceId, u64);

fn row_key(s: &SensorSample) -> RowKey {
    (s.t_ms, s.modality(), s.device.clone(), s.seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestoreReport {
    pub rows: usize,
    pub discarded_bytes: u64,
}

pub struct EdgeBuffer {
    device: DeviceId,
    rows: BTreeMap<RowKey, SensorSample>,
    index: HashMap<SampleKey, RowKey>,
    next_seq: BTreeMap<Modality, u64>,
    batch_counter: u64,
    /// Keys of every batch handed out and not yet acked.
    sent: BTreeMap<String, Vec<SampleKey>>,
    quarantine: Vec<Quarantined>,
    wear: WearMonitor,
    log: DurableLog,
    log_records: usize,
}

impl std::fmt::Debug for EdgeBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeBuffer")
            .field("device", &self.device)
            .field("rows", &self.rows.len())
            .field("next_seq", &self.next_seq)
            .field("batch_counter", &self.batch_counter)
            .finish_non_exhaustive()
    }
}

impl EdgeBuffer {
    /// Opens the buffer for `device`, restoring from `path` if it has content.
    pub fn open(device: DeviceId, path: &Path) -> Result<(Self, RestoreReport), EdgeError> {
        let has_content = std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        if has_content {
            let (buf, report) = restore_from_disk(path)?;
            if buf.device != device {
                return Err(EdgeError::WrongDevice { path: path.display().to_string(), expected: device, found: buf.device });
            }
            return Ok((buf, report));
        }
        let mut buf = Self::empty(device.clone(), DurableLog::open_append(path)?);
        buf.append(&LogRecord::Open { device })?;
        Ok((buf, RestoreReport { rows: 0, discarded_bytes: 0 }))
    }

    fn empty(device: DeviceId, log: DurableLog) -> Self {
        Self {
            device,
            rows: BTreeMap::new(),
            index: HashMap::new(),
            next_seq: BTreeMap::new(),
            batch_counter: 0,
            sent: BTreeMap::new(),
            quarantine: Vec::new(),
            wear: WearMonitor::default(),
            log,
            log_records: 0,
        }
    }

    fn append(&mut self, rec: &LogRecord) -> Result<(), EdgeError> {
        self.log.append(rec)?;
        self.log_records += 1;
        Ok(())
    }

    pub fn device(&self) -> &DeviceId {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn next_seq(&self, modality: Modality) -> u64 {
        self.next_seq.get(&modality).copied().unwrap_or(0)
    }

    pub fn rows(&self) -> impl Iterator<Item = &SensorSample> {
        self.rows.values()
    }

    pub fn contains(&self, key: &SampleKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn quarantine(&self) -> &[Quarantined] {
        &self.quarantine
    }

    pub fn wear_monitor(&self) -> &WearMonitor {
        &self.wear
    }

    /// Appends a locally emitted sample. Its seq must be exactly the next one
    /// for its modality; invalid samples are quarantined, not dropped.
    pub fn record_sample(&mut self, s: SensorSample) -> Result<RecordOutcome, EdgeError> {
        if s.device != self.device {
            return Err(EdgeError::ForeignSample { device: self.device.clone(), origin: s.device });
        }
        let modality = s.modality();
        let expected = self.next_seq(modality);
        if s.seq < expected {
            return Err(EdgeError::SeqRegression { device: self.device.clone(), modality, expected, got: s.seq });
        }
        if s.seq > expected {
            return Err(EdgeError::SeqGap { device: self.device.clone(), modality, expected, got: s.seq });
        }
        self.next_seq.insert(modality, expected + 1);
        let violations = validate_sample(&s);
        if !violations.is_empty() {
            let reasons: Vec<String> = violations.into_iter().map(str::to_string).collect();
            self.append(&LogRecord::Quarantine { sample: s.clone(), reasons: reasons.clone() })?;
            self.quarantine.push(Quarantined { sample: s, reasons: reasons.clone() });
            return Ok(RecordOutcome::Quarantined(reasons));
        }
        self.append(&LogRecord::Sample { sample: s.clone() })?;
        self.insert_row(s);
        Ok(RecordOutcome::Recorded)
    }

    fn insert_row(&mut self, s: SensorSample) -> bool {
        let key = s.key();
        if self.index.contains_key(&key) {
            return false;
        }
        let rk = row_key(&s);
        self.index.insert(key, rk.clone());
        self.rows.insert(rk, s);
        true
    }

    /// Phone side of the BLE relay: stores the watch's samples under their
    /// original device id and returns the relay ack.
    pub fn receive_relay(&mut self, batch: &BatchEnvelope) -> Result<Ack, EdgeError> {
        if batch.origin.kind() != DeviceKind::Watch {
            return Err(EdgeError::BadRelay(format!("origin {} is not a watch", batch.origin)));
        }
        let violations = batch.violations(usize::MAX);
        if !violations.is_empty() {
            return Err(EdgeError::BadRelay(violations.join("; ")));
        }
        let (mut accepted, mut duplicates) = (0, 0);
        for s in &batch.samples {
            self.wear.observe(s.t_ms);
            if self.index.contains_key(&s.key()) {
                duplicates += 1;
                continue;
            }
            self.append(&LogRecord::Sample { sample: s.clone() })?;
            self.insert_row(s.clone());
            accepted += 1;
        }
        Ok(Ack { batch_id: batch.batch_id.clone(), status: AckStatus::Ok, accepted, duplicates })
    }

    /// Builds one envelope per origin present in the buffer, each from that
    /// origin's oldest `max_batch` rows. Rows stay buffered until acked.
    pub fn prepare_batches(&mut self, now_ms: i64, max_batch: usize) -> Result<Vec<BatchEnvelope>, EdgeError> {
        let index = &self.index;
        self.sent.retain(|_, keys| keys.iter().any(|k| index.contains_key(k)));
        let mut groups: BTreeMap<&DeviceId, Vec<&SensorSample>> = BTreeMap::new();
        for s in self.rows.values() {
            let g = groups.entry(&s.device).or_default();
            if g.len() < max_batch {
                g.push(s);
            }
        }
        let groups: Vec<(DeviceId, Vec<SensorSample>)> =
            groups.into_iter().map(|(d, rows)| (d.clone(), rows.into_iter().cloned().collect())).collect();
        let mut out = Vec::with_capacity(groups.len());
        for (origin, samples) in groups {
            self.batch_counter += 1;
            let counter = self.batch_counter;
            self.append(&LogRecord::Batch { counter })?;
            let batch_id = format!("{}#{counter}", self.device);
            self.sent.insert(batch_id.clone(), samples.iter().map(SensorSample::key).collect());
            let relayed_by = (origin != self.device).then(|| self.device.clone());
            out.push(BatchEnvelope { batch_id, origin, relayed_by, samples, created_ms: now_ms });
        }
        Ok(out)
    }

    /// Applies an ack: on `ok`, deletes (durably) every still-buffered row of
    /// the acked batch. Returns the number of rows deleted.
    pub fn on_ack(&mut self, ack: &Ack) -> Result<usize, EdgeError> {
        if !ack.is_ok() {
            return Ok(0);
        }
        let Some(keys) = self.sent.remove(&ack.batch_id) else {
            return Ok(0);
        };
        let present: Vec<SampleKey> = keys.into_iter().filter(|k| self.index.contains_key(k)).collect();
        if present.is_empty() {
            return Ok(0);
        }
        self.append(&LogRecord::Ack { batch_id: ack.batch_id.clone(), keys: present.clone() })?;
        for k in &present {
            if let Some(rk) = self.index.remove(k) {
                self.rows.remove(&rk);
            }
        }
        self.maybe_compact()?;
        Ok(present.len())
    }

    /// One synchronous flush: send every prepared envelope, delete on ack.
    pub fn flush(&mut self, link: &mut dyn BatchTransport, now_ms: i64, max_batch: usize) -> Result<FlushOutcome, EdgeError> {
        let batches = self.prepare_batches(now_ms, max_batch)?;
        if batches.is_empty() {
            return Ok(FlushOutcome::NothingToSend);
        }
        let (mut batch_ids, mut n, mut failure) = (Vec::new(), 0, None);
        for env in batches {
            match link.send(&env) {
                Ok(ack) if ack.is_ok() => {
                    n += self.on_ack(&ack)?;
                    batch_ids.push(env.batch_id);
                }
                Ok(_) => failure = failure.or(Some(FailReason::Rejected)),
                Err(TransportError::LinkDown) => failure = failure.or(Some(FailReason::LinkDown)),
                Err(TransportError::DroppedRequest | TransportError::DroppedAck) => {
                    failure = failure.or(Some(FailReason::Timeout))
                }
            }
        }
        Ok(match failure {
            Some(reason) => FlushOutcome::Failed(reason),
            None => FlushOutcome::Sent { batch_ids, n },
        })
    }

    /// Phone-only: records that a watch sample was seen at `t_ms` (through
    /// the BLE connection or a relayed batch).
    pub fn observe_watch_sample(&mut self, t_ms: i64) {
        self.wear.observe(t_ms);
    }

    /// Phone-only: emits one `wear_watch` notification sample when no watch
    /// data was seen in `[now - interval, now)`, at most once per gap.
    pub fn check_wear_gap(&mut self, now_ms: i64, interval_ms: i64) -> Result<Option<SensorSample>, EdgeError> {
        if self.device.kind() != DeviceKind::Phone {
            return Err(EdgeError::NotPhone(self.device.clone()));
        }
        let fire = self.wear.check(now_ms, interval_ms);
        let rec = LogRecord::Wear { last_seen_ms: self.wear.last_seen_before(now_ms), armed: self.wear.armed };
        self.append(&rec)?;
        if !fire {
            return Ok(None);
        }
        let sample = SensorSample {
            device: self.device.clone(),
            seq: self.next_seq(Modality::Notification),
            t_ms: now_ms,
            payload: Payload::Notification(Notification { kind: WEAR_NOTIFICATION_KIND.to_string() }),
        };
        self.record_sample(sample.clone())?;
        Ok(Some(sample))
    }

    fn maybe_compact(&mut self) -> Result<(), EdgeError> {
        if self.log_records < self.rows.len() * 4 + COMPACT_SLACK {
            return Ok(());
        }
        let mut recs = Vec::with_capacity(self.rows.len() + self.quarantine.len() + 3);
        recs.push(LogRecord::Open { device: self.device.clone() });
        recs.push(LogRecord::Checkpoint { next_seq: self.next_seq.clone(), batch_counter: self.batch_counter });
        recs.push(LogRecord::Wear { last_seen_ms: self.wear.seen.iter().next_back().copied(), armed: self.wear.armed });
        recs.extend(self.quarantine.iter().map(|q| LogRecord::Quarantine { sample: q.sample.clone(), reasons: q.reasons.clone() }));
        recs.extend(self.rows.values().map(|s| LogRecord::Sample { sample: s.clone() }));
        self.log.rewrite(&recs)?;
        self.log_records = recs.len();
        Ok(())
    }
}

/// Rebuilds a buffer from its durable log: acked rows are gone, counters
/// resume above anything ever recorded, a torn tail is truncated.
pub fn restore_from_disk(path: &Path) -> Result<(EdgeBuffer, RestoreReport), EdgeError> {
    let outcome = log::DurableLog::read_all(path)?;
    let mut records = outcome.records.into_iter();
    let device = match records.next() {
        Some(LogRecord::Open { device }) => device,
        _ => return Err(EdgeError::MissingHeader(path.display().to_string())),
    };
    let mut buf = EdgeBuffer::empty(device, DurableLog::open_append(path)?);
    buf.log_records = 1;
    let bump = |next: &mut BTreeMap<Modality, u64>, s: &SensorSample| {
        let e = next.entry(s.modality()).or_insert(0);
        *e = (*e).max(s.seq + 1);
    };
    for rec in records {
        buf.log_records += 1;
        match rec {
            LogRecord::Open { device } => {
                return Err(EdgeError::WrongDevice { path: path.display().to_string(), expected: buf.device, found: device })
            }
            LogRecord::Checkpoint { next_seq, batch_counter } => {
                for (m, n) in next_seq {
                    let e = buf.next_seq.entry(m).or_insert(0);
                    *e = (*e).max(n);
                }
                buf.batch_counter = buf.batch_counter.max(batch_counter);
            }
            LogRecord::Sample { sample } => {
                if sample.device == buf.device {
                    bump(&mut buf.next_seq, &sample);
                }
                buf.insert_row(sample);
            }
            LogRecord::Quarantine { sample, reasons } => {
                bump(&mut buf.next_seq, &sample);
                buf.quarantine.push(Quarantined { sample, reasons });
            }
            LogRecord::Ack { keys, .. } => {
                for k in &keys {
                    if let Some(rk) = buf.index.remove(k) {
                        buf.rows.remove(&rk);
                    }
                }
            }
            LogRecord::Batch { counter } => buf.batch_counter = buf.batch_counter.max(counter),
            LogRecord::Wear { last_seen_ms, armed } => {
                buf.wear = WearMonitor { seen: last_seen_ms.into_iter().collect(), armed };
            }
        }
    }
    let report = RestoreReport { rows: buf.rows.len(), discarded_bytes: outcome.discarded_bytes };
    Ok((buf, report))
}

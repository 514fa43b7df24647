//! The store-and-forward wire unit and its receipt.
//!
//! `BatchEnvelope` serializes to the canonical ingest body:
//!
//! ```json
//! {"batch_id":"p1-watch-0#4","origin":"p1-watch-0","relayed_by":null,"created_ms":0,
//!  "samples":[{"modality":"accel","seq":0,"t_ms":0,"payload":{"ax_g":0.0,"ay_g":0.0,"az_g":1.0}}]}
//! ```
//!
//! Samples carry no device field; every sample belongs to `origin`. Unknown
//! fields are rejected at every level, and `relayed_by` must be present
//! (string or null).

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::model::{validate_sample, DeviceId, Modality, Payload, SensorSample};

pub const DEFAULT_MAX_BATCH: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireEnvelope", into = "WireEnvelope")]
pub struct BatchEnvelope {
    pub batch_id: String,
    pub origin: DeviceId,
    pub relayed_by: Option<DeviceId>,
    pub samples: Vec<SensorSample>,
    pub created_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Ok,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub batch_id: String,
    pub status: AckStatus,
    pub accepted: u64,
    pub duplicates: u64,
}

impl Ack {
    pub fn reject(batch_id: impl Into<String>) -> Self {
        Self { batch_id: batch_id.into(), status: AckStatus::Reject, accepted: 0, duplicates: 0 }
    }

    pub fn is_ok(&self) -> bool {
        self.status == AckStatus::Ok
    }
}

/// Sort key for samples inside one envelope.
pub(crate) fn envelope_order(s: &SensorSample) -> (i64, Modality, u64) {
    (s.t_ms, s.modality(), s.seq)
}

impl BatchEnvelope {
    /// Every structural problem with the envelope; empty means acceptable.
    pub fn violations(&self, max_batch: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_id.is_empty() {
            out.push("empty batch_id".to_string());
        }
        if self.samples.is_empty() {
            out.push("empty batch".to_string());
        }
        if self.samples.len() > max_batch {
            out.push(format!("batch of {} exceeds max {max_batch}", self.samples.len()));
        }
        if self.samples.windows(2).any(|w| envelope_order(&w[0]) > envelope_order(&w[1])) {
            out.push("samples not sorted by (t_ms, modality, seq)".to_string());
        }
        for s in &self.samples {
            if s.device != self.origin {
                out.push(format!("sample {} not from origin {}", s.key(), self.origin));
            }
            for v in validate_sample(s) {
                out.push(format!("{}: {v}", s.key()));
            }
        }
        out
    }
}

fn required_nullable<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    Option::<String>::deserialize(d)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSample {
    modality: Modality,
    seq: u64,
    t_ms: i64,
    payload: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEnvelope {
    batch_id: String,
    origin: DeviceId,
    #[serde(deserialize_with = "required_nullable")]
    relayed_by: Option<String>,
    created_ms: i64,
    samples: Vec<WireSample>,
}

impl TryFrom<WireEnvelope> for BatchEnvelope {
    type Error = String;

    fn try_from(w: WireEnvelope) -> Result<Self, Self::Error> {
        let relayed_by = w.relayed_by.map(|r| r.parse::<DeviceId>()).transpose().map_err(|e| e.to_string())?;
        let samples = w
            .samples
            .into_iter()
            .map(|s| {
                Ok(SensorSample {
                    device: w.origin.clone(),
                    seq: s.seq,
                    t_ms: s.t_ms,
                    payload: Payload::from_json(s.modality, s.payload).map_err(|e| e.to_string())?,
                })
            })
            .collect::<Result<_, String>>()?;
        Ok(Self { batch_id: w.batch_id, origin: w.origin, relayed_by, samples, created_ms: w.created_ms })
    }
}

impl From<BatchEnvelope> for WireEnvelope {
    fn from(e: BatchEnvelope) -> Self {
        WireEnvelope {
            batch_id: e.batch_id,
            origin: e.origin,
            relayed_by: e.relayed_by.map(|d| d.to_string()),
            created_ms: e.created_ms,
            samples: e
                .samples
                .into_iter()
                .map(|s| WireSample { modality: s.modality(), payload: s.payload.to_json(), seq: s.seq, t_ms: s.t_ms })
                .collect(),
        }
    }
}

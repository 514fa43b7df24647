//! Deterministic discrete-event simulation primitives.
//!
//! Events fire in `(t_ms, insertion order)` order, every random draw comes
//! from a ChaCha stream derived from the scenario seed and a stream name,
//! and everything observable is recorded in an [`EventTrace`].

pub mod world;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geofence::Direction;
use crate::model::{DeviceId, SampleKey};

pub use self::world::{
    position_at, ActivityLevel, ActivityWindow, Emissions, Emitter, ParticipantTrace, Trip, Waypoint,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {at} before current time {now}")]
    Causality { at: i64, now: i64 },
    #[error("time {t} outside scenario window [{start}, {end}]")]
    OutOfRange { t: i64, start: i64, end: i64 },
}

/// 64-bit FNV-1a, used to turn stream names into seed material.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG for the named stream.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(stream.as_bytes())))
}

/// RNG for item `k` of a stream; lets payloads be a pure function of their
/// tick instead of the order in which they were generated.
pub fn item_rng(seed: u64, stream: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ fnv1a(stream.as_bytes())) ^ k))
}

struct Entry<E> {
    t_ms: i64,
    tie: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.t_ms, self.tie) == (other.t_ms, other.tie)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t_ms, other.tie).cmp(&(self.t_ms, self.tie))
    }
}

/// Simulation clock plus pending-event queue.
pub struct EventQueue<E> {
    now_ms: i64,
    next_tie: u64,
    heap: BinaryHeap<Entry<E>>,
}

impl<E> EventQueue<E> {
    pub fn new(start_ms: i64) -> Self {
        Self { now_ms: start_ms, next_tie: 0, heap: BinaryHeap::new() }
    }

    pub fn now_ms(&self) -> i64 {
        self.now_ms
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, t_ms: i64, event: E) -> Result<(), SimError> {
        if t_ms < self.now_ms {
            return Err(SimError::Causality { at: t_ms, now: self.now_ms });
        }
        self.heap.push(Entry { t_ms, tie: self.next_tie, event });
        self.next_tie += 1;
        Ok(())
    }

    pub fn peek_time(&self) -> Option<i64> {
        self.heap.peek().map(|e| e.t_ms)
    }

    /// Pops the next event at or before `until_ms`, advancing the clock.
    pub fn pop_until(&mut self, until_ms: i64) -> Option<(i64, E)> {
        if self.heap.peek()?.t_ms > until_ms {
            return None;
        }
        let e = self.heap.pop()?;
        self.now_ms = e.t_ms;
        Some((e.t_ms, e.event))
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.heap.iter().map(|e| &e.event)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    WanPhone,
    WanWatch,
    Ble,
}

impl LinkName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WanPhone => "wan_phone",
            Self::WanWatch => "wan_watch",
            Self::Ble => "ble",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub name: LinkName,
    pub latency_ms: i64,
    pub drop_prob_request: f64,
    pub drop_prob_ack: f64,
    /// Sorted, non-overlapping `[start, end)` windows.
    pub outage_windows: Vec<(i64, i64)>,
}

impl LinkModel {
    pub fn perfect(name: LinkName, latency_ms: i64) -> Self {
        Self { name, latency_ms, drop_prob_request: 0.0, drop_prob_ack: 0.0, outage_windows: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.latency_ms < 0 {
            return Err(format!("latency_ms must be non-negative, got {}", self.latency_ms));
        }
        for (name, p) in [("drop_prob_request", self.drop_prob_request), ("drop_prob_ack", self.drop_prob_ack)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let mut prev_end = i64::MIN;
        for (i, &(a, b)) in self.outage_windows.iter().enumerate() {
            if a >= b {
                return Err(format!("outage_windows[{i}] is empty or inverted"));
            }
            if a < prev_end {
                return Err(format!("outage_windows[{i}] overlaps or precedes the previous window"));
            }
            prev_end = b;
        }
        Ok(())
    }

    pub fn is_up(&self, t_ms: i64) -> bool {
        let i = self.outage_windows.partition_point(|&(_, end)| end <= t_ms);
        self.outage_windows.get(i).is_none_or(|&(start, _)| t_ms < start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    DeliveredAt(i64),
    DroppedRequest,
    /// Delivered at the given time, but the ack will never come back.
    DroppedAck(i64),
    LinkDown,
}

/// One transmission attempt. When the link is up exactly two draws are
/// taken, request first, so the stream stays aligned whatever the outcome.
pub fn link_transmit(link: &LinkModel, now_ms: i64, rng: &mut impl Rng) -> Delivery {
    if !link.is_up(now_ms) {
        return Delivery::LinkDown;
    }
    let req: f64 = rng.random();
    let ack: f64 = rng.random();
    let at = now_ms + link.latency_ms;
    if req < link.drop_prob_request {
        Delivery::DroppedRequest
    } else if ack < link.drop_prob_ack {
        Delivery::DroppedAck(at)
    } else {
        Delivery::DeliveredAt(at)
    }
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceEvent {
    Emit { t: i64, key: SampleKey },
    Fence { t: i64, participant: String, direction: Direction },
    Notify { t: i64, key: SampleKey },
    Hold { t: i64, device: DeviceId, rows: usize },
    Send { t: i64, device: DeviceId, link: LinkName, batch_id: String, n: usize },
    LinkDown { t: i64, device: DeviceId, link: LinkName, batch_id: String },
    DropRequest { t: i64, link: LinkName, batch_id: String },
    Deliver { t: i64, link: LinkName, batch_id: String, accepted: u64, duplicates: u64 },
    DropAck { t: i64, link: LinkName, batch_id: String },
    Ack { t: i64, device: DeviceId, batch_id: String },
    Delete { t: i64, device: DeviceId, batch_id: String, n: usize },
    Timeout { t: i64, device: DeviceId, batch_id: String },
    Crash { t: i64, device: DeviceId },
    Restore { t: i64, device: DeviceId, rows: usize, discarded_bytes: u64 },
    Poll { t: i64, device: DeviceId, outcome: String, fetched: usize, accepted: u64, duplicates: u64, reauthenticated: bool },
}

impl TraceEvent {
    pub fn t(&self) -> i64 {
        match self {
            Self::Emit { t, .. }
            | Self::Fence { t, .. }
            | Self::Notify { t, .. }
            | Self::Hold { t, .. }
            | Self::Send { t, .. }
            | Self::LinkDown { t, .. }
            | Self::DropRequest { t, .. }
            | Self::Deliver { t, .. }
            | Self::DropAck { t, .. }
            | Self::Ack { t, .. }
            | Self::Delete { t, .. }
            | Self::Timeout { t, .. }
            | Self::Crash { t, .. }
            | Self::Restore { t, .. }
            | Self::Poll { t, .. } => *t,
        }
    }
}

/// Ordered record of everything that happened in a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn parse_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let events = text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { events })
    }
}

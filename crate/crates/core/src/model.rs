//! Shared domain vocabulary: devices, modalities, samples, dedup keys and
//! time segmentation.
//!
//! Every other module depends on these types only. All values are immutable
//! once built and the canonical string forms (`DeviceId`, `SampleKey`) are
//! stable: they appear verbatim in the wire protocol, the durable logs and
//! the merged CSV output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const HOUR_MS: i64 = 3_600_000;
pub const DAY_MS: i64 = 24 * HOUR_MS;

/// Heart-rate values outside this band are rejected as sensor garbage.
pub const BPM_RANGE: (f64, f64) = (20.0, 250.0);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid device id `{0}`")]
    DeviceId(String),
    #[error("unknown modality `{0}`")]
    Modality(String),
    #[error("unknown segment length `{0}`")]
    SegmentLength(String),
    #[error("payload does not match modality {modality}: {reason}")]
    Payload { modality: Modality, reason: String },
    #[error("invalid sample key `{0}`")]
    SampleKey(String),
    #[error("invalid sampling policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Phone,
    Watch,
    Motion,
    Sleep,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 4] = [Self::Phone, Self::Watch, Self::Motion, Self::Sleep];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Phone => "phone",
            Self::Watch => "watch",
            Self::Motion => "motion",
            Self::Sleep => "sleep",
        }
    }
}

impl FromStr for DeviceKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::DeviceId(s.to_string()))
    }
}

/// A device rendered as `<participant>-<kind>-<index>`, e.g. `p1-watch-0`.
///
/// Participant names are restricted to ASCII alphanumerics and `_` so the
/// rendering can be parsed back unambiguously.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId {
    participant: String,
    kind: DeviceKind,
    index: u16,
}

impl DeviceId {
    pub fn new(participant: &str, kind: DeviceKind, index: u16) -> Result<Self, ModelError> {
        if !is_valid_participant(participant) {
            return Err(ModelError::DeviceId(format!("{participant}-{}-{index}", kind.as_str())));
        }
        Ok(Self { participant: participant.to_string(), kind, index })
    }

    pub fn participant(&self) -> &str {
        &self.participant
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    pub fn index(&self) -> u16 {
        self.index
    }
}

pub fn is_valid_participant(p: &str) -> bool {
    !p.is_empty() && p.len() <= 32 && p.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.participant, self.kind.as_str(), self.index)
    }
}

impl FromStr for DeviceId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::DeviceId(s.to_string());
        let mut parts = s.rsplitn(3, '-');
        let index = parts.next().ok_or_else(bad)?;
        let kind = parts.next().ok_or_else(bad)?;
        let participant = parts.next().ok_or_else(bad)?;
        // Reject leading zeros / signs so rendering round-trips exactly.
        if index.is_empty() || (index.len() > 1 && index.starts_with('0')) || !index.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let index: u16 = index.parse().map_err(|_| bad())?;
        let kind: DeviceKind = kind.parse().map_err(|_| bad())?;
        DeviceId::new(participant, kind, index).map_err(|_| bad())
    }
}

impl Serialize for DeviceId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Location,
    Accel,
    HeartRate,
    Steps,
    MotionEvent,
    SleepSession,
    Notification,
}

impl Modality {
    pub const ALL: [Modality; 7] = [
        Self::Location,
        Self::Accel,
        Self::HeartRate,
        Self::Steps,
        Self::MotionEvent,
        Self::SleepSession,
        Self::Notification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Location => "location",
            Self::Accel => "accel",
            Self::HeartRate => "heart_rate",
            Self::Steps => "steps",
            Self::MotionEvent => "motion_event",
            Self::SleepSession => "sleep_session",
            Self::Notification => "notification",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::Modality(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accel {
    pub ax_g: f64,
    pub ay_g: f64,
    pub az_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartRate {
    pub bpm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Steps {
    pub step_count: u32,
}

/// One nap or night of sleep as summarised by the mattress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SleepSummary {
    pub start_ms: i64,
    pub end_ms: i64,
    pub total_sleep_s: u32,
    pub deep_sleep_s: u32,
    pub avg_hr_bpm: f64,
    pub snoring_s: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Notification {
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

/// Modality-specific reading. The modality of a sample is derived from its
/// payload, so a sample can never carry two.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Location(Location),
    Accel(Accel),
    HeartRate(HeartRate),
    Steps(Steps),
    MotionEvent,
    SleepSession(SleepSummary),
    Notification(Notification),
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Self::Location(_) => Modality::Location,
            Self::Accel(_) => Modality::Accel,
            Self::HeartRate(_) => Modality::HeartRate,
            Self::Steps(_) => Modality::Steps,
            Self::MotionEvent => Modality::MotionEvent,
            Self::SleepSession(_) => Modality::SleepSession,
            Self::Notification(_) => Modality::Notification,
        }
    }

    pub fn to_json(&self) -> Value {
        let v = match self {
            Self::Location(p) => serde_json::to_value(p),
            Self::Accel(p) => serde_json::to_value(p),
            Self::HeartRate(p) => serde_json::to_value(p),
            Self::Steps(p) => serde_json::to_value(p),
            Self::MotionEvent => serde_json::to_value(Empty {}),
            Self::SleepSession(p) => serde_json::to_value(p),
            Self::Notification(p) => serde_json::to_value(p),
        };
        v.expect("payload structs always serialize")
    }

    pub fn from_json(modality: Modality, value: Value) -> Result<Self, ModelError> {
        let err = |e: serde_json::Error| ModelError::Payload { modality, reason: e.to_string() };
        Ok(match modality {
            Modality::Location => Self::Location(serde_json::from_value(value).map_err(err)?),
            Modality::Accel => Self::Accel(serde_json::from_value(value).map_err(err)?),
            Modality::HeartRate => Self::HeartRate(serde_json::from_value(value).map_err(err)?),
            Modality::Steps => Self::Steps(serde_json::from_value(value).map_err(err)?),
            Modality::MotionEvent => {
                let Empty {} = serde_json::from_value(value).map_err(err)?;
                Self::MotionEvent
            }
            Modality::SleepSession => Self::SleepSession(serde_json::from_value(value).map_err(err)?),
            Modality::Notification => Self::Notification(serde_json::from_value(value).map_err(err)?),
        })
    }
}

/// Canonical dedup key `<device>/<modality>/<seq>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleKey(String);

impl SampleKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Splits the key back into its parts.
    pub fn parse(&self) -> Result<(DeviceId, Modality, u64), ModelError> {
        let bad = || ModelError::SampleKey(self.0.clone());
        let mut it = self.0.split('/');
        let (Some(d), Some(m), Some(s), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        Ok((d.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?, s.parse().map_err(|_| bad())?))
    }
}

impl fmt::Display for SampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds the dedup key. `seq` is unsigned, so the "negative sequence"
/// failure mode is rejected at parse time instead.
pub fn make_sample_key(device: &DeviceId, modality: Modality, seq: u64) -> SampleKey {
    SampleKey(format!("{device}/{modality}/{seq}"))
}

/// One timestamped reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRepr", into = "SampleRepr")]
pub struct SensorSample {
    pub device: DeviceId,
    pub seq: u64,
    pub t_ms: i64,
    pub payload: Payload,
}

impl SensorSample {
    pub fn modality(&self) -> Modality {
        self.payload.modality()
    }

    pub fn key(&self) -> SampleKey {
        make_sample_key(&self.device, self.modality(), self.seq)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRepr {
    device: DeviceId,
    modality: Modality,
    seq: u64,
    t_ms: i64,
    payload: Value,
}

impl TryFrom<SampleRepr> for SensorSample {
    type Error = ModelError;

    fn try_from(r: SampleRepr) -> Result<Self, Self::Error> {
        Ok(SensorSample { device: r.device, seq: r.seq, t_ms: r.t_ms, payload: Payload::from_json(r.modality, r.payload)? })
    }
}

impl From<SensorSample> for SampleRepr {
    fn from(s: SensorSample) -> Self {
        SampleRepr { modality: s.modality(), payload: s.payload.to_json(), device: s.device, seq: s.seq, t_ms: s.t_ms }
    }
}

pub const V_BPM: &str = "bpm out of range";
pub const V_SLEEP_INVERTED: &str = "sleep interval inverted";
pub const V_SLEEP_TIMESTAMP: &str = "sleep timestamp differs from end_ms";
pub const V_SLEEP_DURATIONS: &str = "sleep durations exceed interval";
pub const V_LAT: &str = "latitude out of range";
pub const V_LON: &str = "longitude out of range";
pub const V_NON_FINITE: &str = "non-finite value";
pub const V_WINDOW: &str = "timestamp outside scenario window";
pub const V_NOTIFICATION_KIND: &str = "notification kind not a lowercase identifier";

/// Lists every violated sample invariant; an empty list means valid.
pub fn validate_sample(s: &SensorSample) -> Vec<&'static str> {
    let mut out = Vec::new();
    let finite = |xs: &[f64], out: &mut Vec<&'static str>| {
        if xs.iter().any(|x| !x.is_finite()) {
            out.push(V_NON_FINITE);
            false
        } else {
            true
        }
    };
    match &s.payload {
        Payload::Location(p) => {
            if finite(&[p.lat_deg, p.lon_deg], &mut out) {
                if !(-90.0..=90.0).contains(&p.lat_deg) {
                    out.push(V_LAT);
                }
                if !(-180.0..=180.0).contains(&p.lon_deg) {
                    out.push(V_LON);
                }
            }
        }
        Payload::Accel(p) => {
            finite(&[p.ax_g, p.ay_g, p.az_g], &mut out);
        }
        Payload::HeartRate(p) => {
            if finite(&[p.bpm], &mut out) && !(BPM_RANGE.0..=BPM_RANGE.1).contains(&p.bpm) {
                out.push(V_BPM);
            }
        }
        Payload::Steps(_) | Payload::MotionEvent => {}
        Payload::SleepSession(p) => {
            if p.start_ms >= p.end_ms {
                out.push(V_SLEEP_INVERTED);
            } else {
                let span_s = (p.end_ms - p.start_ms) / 1000;
                if i64::from(p.total_sleep_s) > span_s || p.deep_sleep_s > p.total_sleep_s || p.snoring_s > p.total_sleep_s {
                    out.push(V_SLEEP_DURATIONS);
                }
            }
            if s.t_ms != p.end_ms {
                out.push(V_SLEEP_TIMESTAMP);
            }
            if finite(&[p.avg_hr_bpm], &mut out) && !(BPM_RANGE.0..=BPM_RANGE.1).contains(&p.avg_hr_bpm) {
                out.push(V_BPM);
            }
        }
        Payload::Notification(n) => {
            if n.kind.is_empty() || !n.kind.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                out.push(V_NOTIFICATION_KIND);
            }
        }
    }
    out
}

/// [`validate_sample`] plus the scenario-window check on `t_ms`.
pub fn validate_sample_within(s: &SensorSample, window: (i64, i64)) -> Vec<&'static str> {
    let mut out = validate_sample(s);
    if s.t_ms < window.0 || s.t_ms >= window.1 {
        out.push(V_WINDOW);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLength {
    Hour,
    #[default]
    Day,
}

impl SegmentLength {
    pub fn ms(self) -> i64 {
        match self {
            Self::Hour => HOUR_MS,
            Self::Day => DAY_MS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hour => "hour",
            Self::Day => "day",
        }
    }
}

impl FromStr for SegmentLength {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hour" => Ok(Self::Hour),
            "day" => Ok(Self::Day),
            _ => Err(ModelError::SegmentLength(s.to_string())),
        }
    }
}

/// Start (UTC ms) of the segment containing `t_ms`, with boundaries aligned
/// in local time `t_ms + utc_offset_min`.
pub fn segment_of(t_ms: i64, length: SegmentLength, utc_offset_min: i32) -> i64 {
    let offset = i64::from(utc_offset_min) * 60_000;
    let local = t_ms + offset;
    local - local.rem_euclid(length.ms()) - offset
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId {
    pub modality: Modality,
    pub start_ms: i64,
    pub length: SegmentLength,
}

impl SegmentId {
    pub fn end_ms(&self) -> i64 {
        self.start_ms + self.length.ms()
    }
}

/// Per-participant sampling schedule. Defaults are the deployment's
/// published rates; flush periods are study-design knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    pub location_hz: f64,
    pub accel_hz: f64,
    pub hr_burst_period_s: u32,
    pub hr_burst_len_s: u32,
    pub hr_in_burst_hz: f64,
    pub steps_emission_period_s: u32,
    pub phone_flush_period_s: u32,
    pub watch_flush_period_s: u32,
    /// Rate at which the phone evaluates GPS fixes for the geofence; `None`
    /// means the location rate.
    pub fence_eval_hz: Option<f64>,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            location_hz: 0.033,
            accel_hz: 1.0,
            hr_burst_period_s: 1800,
            hr_burst_len_s: 30,
            hr_in_burst_hz: 1.0,
            steps_emission_period_s: 60,
            phone_flush_period_s: 900,
            watch_flush_period_s: 900,
            fence_eval_hz: None,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        let rates = [
            ("location_hz", self.location_hz),
            ("accel_hz", self.accel_hz),
            ("hr_in_burst_hz", self.hr_in_burst_hz),
            ("fence_eval_hz", self.fence_eval_hz.unwrap_or(self.location_hz)),
        ];
        for (name, r) in rates {
            if !(r.is_finite() && r > 0.0) {
                return Err(ModelError::Policy(format!("{name} must be positive, got {r}")));
            }
        }
        let periods = [
            ("hr_burst_period_s", self.hr_burst_period_s),
            ("hr_burst_len_s", self.hr_burst_len_s),
            ("steps_emission_period_s", self.steps_emission_period_s),
            ("phone_flush_period_s", self.phone_flush_period_s),
            ("watch_flush_period_s", self.watch_flush_period_s),
        ];
        for (name, p) in periods {
            if p == 0 {
                return Err(ModelError::Policy(format!("{name} must be positive")));
            }
        }
        if self.hr_burst_len_s > self.hr_burst_period_s {
            return Err(ModelError::Policy("hr_burst_len_s exceeds hr_burst_period_s".into()));
        }
        Ok(())
    }

    pub fn fence_eval_hz(&self) -> f64 {
        self.fence_eval_hz.unwrap_or(self.location_hz)
    }
}

/// Time of the `k`-th tick of a periodic schedule at `hz` anchored at `origin`.
pub fn tick_time(origin: i64, hz: f64, k: u64) -> i64 {
    origin + (k as f64 * 1000.0 / hz).round() as i64
}

/// Index of the first tick at or after `t`.
pub fn first_tick_at_or_after(origin: i64, hz: f64, t: i64) -> u64 {
    if t <= origin {
        return 0;
    }
    let period = 1000.0 / hz;
    let mut k = (((t - origin) as f64) / period).floor().max(0.0) as u64;
    while tick_time(origin, hz, k) < t {
        k += 1;
    }
    while k > 0 && tick_time(origin, hz, k - 1) >= t {
        k -= 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(s: &str) -> DeviceId {
        s.parse().unwrap()
    }

    #[test]
    fn sample_key_examples() {
        assert_eq!(make_sample_key(&dev("p1-watch-0"), Modality::HeartRate, 12).as_str(), "p1-watch-0/heart_rate/12");
        assert_eq!(make_sample_key(&dev("p1-phone-0"), Modality::Location, 0).as_str(), "p1-phone-0/location/0");
    }

    #[test]
    fn device_id_round_trip_and_rejects() {
        for s in ["p1-phone-0", "p_2-watch-3", "abc-sleep-12"] {
            assert_eq!(dev(s).to_string(), s);
        }
        for s in ["p1-tablet-0", "p1-phone-", "p1-phone-01", "-phone-0", "p-1-phone-0", "p1-phone--1", "p1phone0"] {
            assert!(s.parse::<DeviceId>().is_err(), "{s} should be rejected");
        }
    }

    #[test]
    fn key_parses_back() {
        let k = make_sample_key(&dev("p1-watch-0"), Modality::Steps, 77);
        assert_eq!(k.parse().unwrap(), (dev("p1-watch-0"), Modality::Steps, 77));
    }

    fn hr(bpm: f64) -> SensorSample {
        SensorSample { device: dev("p1-watch-0"), seq: 0, t_ms: 0, payload: Payload::HeartRate(HeartRate { bpm }) }
    }

    #[test]
    fn validate_examples() {
        assert!(validate_sample(&hr(72.0)).is_empty());
        assert_eq!(validate_sample(&hr(0.0)), vec![V_BPM]);
        assert_eq!(validate_sample(&hr(20.0)), Vec::<&str>::new());
        assert_eq!(validate_sample(&hr(250.1)), vec![V_BPM]);
        assert_eq!(validate_sample(&hr(f64::NAN)), vec![V_NON_FINITE]);

        let sleep = SensorSample {
            device: dev("p1-sleep-0"),
            seq: 1,
            t_ms: 1000,
            payload: Payload::SleepSession(SleepSummary {
                start_ms: 1000,
                end_ms: 1000,
                total_sleep_s: 0,
                deep_sleep_s: 0,
                avg_hr_bpm: 55.0,
                snoring_s: 0,
            }),
        };
        assert_eq!(validate_sample(&sleep), vec![V_SLEEP_INVERTED]);

        let loc = SensorSample {
            device: dev("p1-phone-0"),
            seq: 0,
            t_ms: 5,
            payload: Payload::Location(Location { lat_deg: 91.0, lon_deg: -181.0 }),
        };
        assert_eq!(validate_sample(&loc), vec![V_LAT, V_LON]);
        assert_eq!(validate_sample_within(&loc, (10, 20)), vec![V_LAT, V_LON, V_WINDOW]);
    }

    #[test]
    fn sample_json_is_canonical() {
        let s = hr(72.5);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"device":"p1-watch-0","modality":"heart_rate","seq":0,"t_ms":0,"payload":{"bpm":72.5}}"#);
        assert_eq!(serde_json::from_str::<SensorSample>(&json).unwrap(), s);
        let extra = r#"{"device":"p1-watch-0","modality":"heart_rate","seq":0,"t_ms":0,"payload":{"bpm":72.5,"x":1}}"#;
        assert!(serde_json::from_str::<SensorSample>(extra).is_err());
        let negative = r#"{"device":"p1-watch-0","modality":"heart_rate","seq":-1,"t_ms":0,"payload":{"bpm":72.5}}"#;
        assert!(serde_json::from_str::<SensorSample>(negative).is_err());
        let mismatch = r#"{"device":"p1-watch-0","modality":"accel","seq":0,"t_ms":0,"payload":{"bpm":72.5}}"#;
        assert!(serde_json::from_str::<SensorSample>(mismatch).is_err());
        let motion = r#"{"device":"p1-motion-0","modality":"motion_event","seq":3,"t_ms":9,"payload":{}}"#;
        assert_eq!(serde_json::to_string(&serde_json::from_str::<SensorSample>(motion).unwrap()).unwrap(), motion);
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment_of(0, SegmentLength::Day, 0), 0);
        assert_eq!(segment_of(HOUR_MS + 1, SegmentLength::Hour, 0), HOUR_MS);
        assert_eq!(segment_of(-1, SegmentLength::Hour, 0), -HOUR_MS);
        assert_eq!(segment_of(HOUR_MS - 1, SegmentLength::Day, 60), -HOUR_MS);
    }

    #[test]
    fn policy_defaults_and_validation() {
        let p = SamplingPolicy::default();
        assert_eq!((p.location_hz, p.accel_hz, p.hr_burst_period_s, p.hr_burst_len_s), (0.033, 1.0, 1800, 30));
        p.validate().unwrap();
        let bad = SamplingPolicy { hr_burst_len_s: 1801, ..SamplingPolicy::default() };
        assert!(bad.validate().is_err());
        let bad = SamplingPolicy { accel_hz: 0.0, ..SamplingPolicy::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tick_helpers_agree() {
        for hz in [0.033, 1.0, 0.5, 1.0 / 60.0] {
            for t in [-5, 0, 1, 999, 1000, 30_303, 30_304, 66_600_000, 81_000_000] {
                let k = first_tick_at_or_after(0, hz, t);
                assert!(tick_time(0, hz, k) >= t);
                assert!(k == 0 || tick_time(0, hz, k - 1) < t);
            }
        }
    }
}

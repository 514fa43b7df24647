//! Declarative scenario files.
//!
//! A scenario is one JSON document. Times inside it are offsets from
//! `start_ms`, written either as integer milliseconds or as a clock string
//! `"HH:MM"` / `"HH:MM:SS"` (hours may exceed 24). [`ScenarioConfig::resolve`]
//! turns offsets into absolute UTC milliseconds and validates everything,
//! reporting the offending field by path (`participants[0].trips[1]: ...`).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectors::DEFAULT_TOKEN_TTL_MS;
use crate::geofence::{GeofenceConfig, LatLon};
use crate::model::{is_valid_participant, DeviceId, DeviceKind, SamplingPolicy, SegmentLength};
use crate::protocol::DEFAULT_MAX_BATCH;
use crate::netsim::{ActivityLevel, ActivityWindow, LinkModel, LinkName, ParticipantTrace, Trip, Waypoint};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { path: path.into(), message: message.into() }
}

/// Offset from scenario start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offset {
    Ms(i64),
    Clock(String),
}

impl Offset {
    pub fn to_ms(&self) -> Result<i64, String> {
        match self {
            Self::Ms(ms) if *ms >= 0 => Ok(*ms),
            Self::Ms(ms) => Err(format!("offset {ms} is negative")),
            Self::Clock(s) => parse_clock(s).ok_or_else(|| format!("`{s}` is not HH:MM or HH:MM:SS")),
        }
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ms(ms) => write!(f, "{ms}"),
            Self::Clock(s) => f.write_str(s),
        }
    }
}

fn parse_clock(s: &str) -> Option<i64> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(2..=3).contains(&parts.len()) || parts.iter().any(|p| p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let h: i64 = parts[0].parse().ok()?;
    let m: i64 = parts[1].parse().ok()?;
    let sec: i64 = parts.get(2).map_or(Some(0), |p| p.parse().ok())?;
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + sec) * 1000)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub start: Offset,
    pub end: Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FenceSettings {
    pub radius_m: f64,
    #[serde(default = "default_hysteresis")]
    pub hysteresis_m: f64,
    /// Defaults to the participant's home.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<LatLon>,
}

fn default_hysteresis() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointConfig {
    pub at: Offset,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripConfig {
    pub depart: Offset,
    #[serde(rename = "return")]
    pub return_: Offset,
    #[serde(default)]
    pub waypoints: Vec<WaypointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityConfig {
    pub start: Offset,
    pub end: Offset,
    pub level: ActivityLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantConfig {
    pub id: String,
    pub home: LatLon,
    pub geofence: FenceSettings,
    #[serde(default)]
    pub trips: Vec<TripConfig>,
    #[serde(default)]
    pub activity: Vec<ActivityConfig>,
    #[serde(default)]
    pub sleep_windows: Vec<Span>,
    #[serde(default)]
    pub charging_windows: Vec<Span>,
    #[serde(default)]
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub gps_jitter_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSettings {
    #[serde(default)]
    pub latency_ms: Option<i64>,
    #[serde(default)]
    pub drop_prob_request: f64,
    #[serde(default)]
    pub drop_prob_ack: f64,
    #[serde(default)]
    pub outage_windows: Vec<Span>,
}

impl Default for LinkSettings {
    fn default() -> Self {
        Self { latency_ms: None, drop_prob_request: 0.0, drop_prob_ack: 0.0, outage_windows: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksConfig {
    pub wan_phone: LinkSettings,
    pub wan_watch: LinkSettings,
    pub ble: LinkSettings,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorSettings {
    pub poll_period_ms: i64,
    pub token_ttl_ms: i64,
    pub page_limit: usize,
    pub client_id: String,
    pub client_secret: String,
}

impl Default for ConnectorSettings {
    fn default() -> Self {
        Self {
            poll_period_ms: 3_600_000,
            token_ttl_ms: DEFAULT_TOKEN_TTL_MS,
            page_limit: 500,
            client_id: "maison".into(),
            client_secret: "maison-secret".into(),
        }
    }
}

/// Scripted faults. Counters are 1-based and per device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// The `send`-th transmission by `device` is delivered but its ack is lost.
    DropAck { device: DeviceId, send: u32 },
    /// `device` crashes on receiving its `ack`-th ack, before deleting.
    CrashAfterAck { device: DeviceId, ack: u32 },
    /// The connector for `device` crashes after ingest acks a page in its
    /// `poll`-th poll, before persisting the cursor.
    ConnectorCrashAfterAck { device: DeviceId, poll: u32 },
    /// The vendor cloud of `device` revokes all tokens before its `poll`-th poll.
    ExpireTokens { device: DeviceId, poll: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub start_ms: i64,
    pub duration: Offset,
    #[serde(default)]
    pub utc_offset_min: i32,
    #[serde(default)]
    pub segment: SegmentLength,
    #[serde(default = "default_gap_threshold")]
    pub gap_threshold_ms: i64,
    #[serde(default = "default_drain")]
    pub drain_max: Offset,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    pub participants: Vec<ParticipantConfig>,
    #[serde(default)]
    pub links: LinksConfig,
    #[serde(default)]
    pub connectors: ConnectorSettings,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

fn default_gap_threshold() -> i64 {
    300_000
}

fn default_drain() -> Offset {
    Offset::Clock("24:00".into())
}

fn default_max_batch() -> usize {
    DEFAULT_MAX_BATCH
}

/// One participant, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: String,
    pub fence: GeofenceConfig,
    pub trace: ParticipantTrace,
    pub policy: SamplingPolicy,
    pub gps_jitter_m: f64,
}

impl Participant {
    pub fn device(&self, kind: DeviceKind) -> DeviceId {
        DeviceId::new(&self.id, kind, 0).expect("participant ids are validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Links {
    pub wan_phone: LinkModel,
    pub wan_watch: LinkModel,
    pub ble: LinkModel,
}

impl Links {
    pub fn get(&self, name: LinkName) -> &LinkModel {
        match name {
            LinkName::WanPhone => &self.wan_phone,
            LinkName::WanWatch => &self.wan_watch,
            LinkName::Ble => &self.ble,
        }
    }
}

/// A validated scenario with absolute UTC times.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub start_ms: i64,
    pub end_ms: i64,
    pub utc_offset_min: i32,
    pub segment: SegmentLength,
    pub gap_threshold_ms: i64,
    pub drain_max_ms: i64,
    pub max_batch: usize,
    pub participants: Vec<Participant>,
    /// Link models applied to every participant's home network.
    pub links: Links,
    pub connectors: ConnectorSettings,
    pub faults: Vec<Fault>,
    /// The source config (seed overrides applied).
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn window(&self) -> (i64, i64) {
        (self.start_ms, self.end_ms)
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::Parse { path: if path == "." { "<root>".into() } else { path }, message: e.into_inner().to_string() }
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        let start = self.start_ms;
        let at = |path: &str, o: &Offset| -> Result<i64, ScenarioError> {
            o.to_ms().map(|ms| start + ms).map_err(|m| invalid(path, m))
        };
        let span = |path: &str, s: &Span| -> Result<(i64, i64), ScenarioError> {
            Ok((at(&format!("{path}.start"), &s.start)?, at(&format!("{path}.end"), &s.end)?))
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let duration = self.duration.to_ms().map_err(|m| invalid("duration", m))?;
        if duration <= 0 {
            return Err(invalid("duration", "must be positive"));
        }
        let end = start + duration;
        if self.utc_offset_min.abs() >= 24 * 60 {
            return Err(invalid("utc_offset_min", "must be within one day"));
        }
        if self.gap_threshold_ms <= 0 {
            return Err(invalid("gap_threshold_ms", "must be positive"));
        }
        if self.max_batch == 0 {
            return Err(invalid("max_batch", "must be positive"));
        }
        let drain_max_ms = self.drain_max.to_ms().map_err(|m| invalid("drain_max", m))?;

        let mut seen = BTreeSet::new();
        let mut participants = Vec::with_capacity(self.participants.len());
        for (i, p) in self.participants.iter().enumerate() {
            let base = format!("participants[{i}]");
            if !is_valid_participant(&p.id) {
                return Err(invalid(format!("{base}.id"), format!("`{}` must be 1-32 of [A-Za-z0-9_]", p.id)));
            }
            if !seen.insert(p.id.clone()) {
                return Err(invalid(format!("{base}.id"), format!("duplicate participant `{}`", p.id)));
            }
            p.policy.validate().map_err(|e| invalid(format!("{base}.policy"), e.to_string()))?;
            let fence = GeofenceConfig {
                center: p.geofence.center.unwrap_or(p.home),
                radius_m: p.geofence.radius_m,
                hysteresis_m: p.geofence.hysteresis_m,
            };
            fence.validate().map_err(|e| invalid(format!("{base}.geofence"), e.to_string()))?;
            if !(p.gps_jitter_m.is_finite() && p.gps_jitter_m >= 0.0) {
                return Err(invalid(format!("{base}.gps_jitter_m"), "must be a non-negative number"));
            }
            let mut trips = Vec::new();
            for (j, t) in p.trips.iter().enumerate() {
                let tp = format!("{base}.trips[{j}]");
                let mut waypoints = Vec::new();
                for (k, w) in t.waypoints.iter().enumerate() {
                    waypoints.push(Waypoint { at_ms: at(&format!("{tp}.waypoints[{k}].at"), &w.at)?, lat: w.lat, lon: w.lon });
                }
                trips.push(Trip { depart_ms: at(&format!("{tp}.depart"), &t.depart)?, return_ms: at(&format!("{tp}.return"), &t.return_)?, waypoints });
            }
            let mut activity = Vec::new();
            for (j, a) in p.activity.iter().enumerate() {
                let ap = format!("{base}.activity[{j}]");
                activity.push(ActivityWindow { start_ms: at(&format!("{ap}.start"), &a.start)?, end_ms: at(&format!("{ap}.end"), &a.end)?, level: a.level });
            }
            let sleep_windows =
                p.sleep_windows.iter().enumerate().map(|(j, s)| span(&format!("{base}.sleep_windows[{j}]"), s)).collect::<Result<_, _>>()?;
            let charging_windows = p
                .charging_windows
                .iter()
                .enumerate()
                .map(|(j, s)| span(&format!("{base}.charging_windows[{j}]"), s))
                .collect::<Result<_, _>>()?;
            let trace = ParticipantTrace {
                participant: p.id.clone(),
                window: (start, end),
                home: p.home,
                trips,
                activity,
                sleep_windows,
                charging_windows,
            };
            trace.validate().map_err(|e| match e.split_once(": ") {
                Some((field, rest)) => invalid(format!("{base}.{field}"), rest),
                None => invalid(&base, e),
            })?;
            participants.push(Participant { id: p.id.clone(), fence, trace, policy: p.policy.clone(), gps_jitter_m: p.gps_jitter_m });
        }

        let link = |name: LinkName, s: &LinkSettings, default_latency: i64| -> Result<LinkModel, ScenarioError> {
            let path = format!("links.{}", name.as_str());
            let outage_windows = s
                .outage_windows
                .iter()
                .enumerate()
                .map(|(j, w)| span(&format!("{path}.outage_windows[{j}]"), w))
                .collect::<Result<Vec<_>, _>>()?;
            let m = LinkModel {
                name,
                latency_ms: s.latency_ms.unwrap_or(default_latency),
                drop_prob_request: s.drop_prob_request,
                drop_prob_ack: s.drop_prob_ack,
                outage_windows,
            };
            m.validate().map_err(|e| invalid(path.clone(), e))?;
            if let Some(&(_, last)) = m.outage_windows.last() {
                if last > end {
                    return Err(invalid(format!("{path}.outage_windows"), "outages must end within the scenario"));
                }
            }
            Ok(m)
        };
        let links = Links {
            wan_phone: link(LinkName::WanPhone, &self.links.wan_phone, 80)?,
            wan_watch: link(LinkName::WanWatch, &self.links.wan_watch, 80)?,
            ble: link(LinkName::Ble, &self.links.ble, 20)?,
        };

        let c = &self.connectors;
        if c.poll_period_ms <= 0 {
            return Err(invalid("connectors.poll_period_ms", "must be positive"));
        }
        if c.token_ttl_ms <= 0 {
            return Err(invalid("connectors.token_ttl_ms", "must be positive"));
        }
        if c.page_limit == 0 {
            return Err(invalid("connectors.page_limit", "must be positive"));
        }

        for (i, f) in self.faults.iter().enumerate() {
            let path = format!("faults[{i}]");
            let (device, n, edge) = match f {
                Fault::DropAck { device, send } => (device, *send, true),
                Fault::CrashAfterAck { device, ack } => (device, *ack, true),
                Fault::ConnectorCrashAfterAck { device, poll } | Fault::ExpireTokens { device, poll } => (device, *poll, false),
            };
            if n == 0 {
                return Err(invalid(&path, "counters are 1-based"));
            }
            if !seen.contains(device.participant()) || device.index() != 0 {
                return Err(invalid(format!("{path}.device"), format!("{device} is not a device of this scenario")));
            }
            let edge_kind = matches!(device.kind(), DeviceKind::Phone | DeviceKind::Watch);
            if edge != edge_kind {
                return Err(invalid(format!("{path}.device"), format!("{device} cannot take this fault")));
            }
        }

        Ok(Scenario {
            name: self.name.clone(),
            seed: self.seed,
            start_ms: start,
            end_ms: end,
            utc_offset_min: self.utc_offset_min,
            segment: self.segment,
            gap_threshold_ms: self.gap_threshold_ms,
            drain_max_ms,
            max_batch: self.max_batch,
            participants,
            links,
            connectors: self.connectors.clone(),
            faults: self.faults.clone(),
            config: self.clone(),
        })
    }
}

/// Parses and resolves in one step, applying an optional seed override.
pub fn load_scenario(text: &str, seed_override: Option<u64>) -> Result<Scenario, ScenarioError> {
    let mut cfg = ScenarioConfig::from_json(text)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t", "seed": 1, "start_ms": 0, "duration": "24:00",
        "participants": [{
            "id": "p1", "home": [43.65, -79.38], "geofence": {"radius_m": 100},
            "trips": [{"depart": "18:30", "return": "22:30",
                       "waypoints": [{"at": "18:31", "lat": 43.668, "lon": -79.38}]}],
            "sleep_windows": [{"start": "02:30", "end": "11:30"}]
        }]
    }"#;

    #[test]
    fn clock_offsets() {
        assert_eq!(parse_clock("02:30"), Some(9_000_000));
        assert_eq!(parse_clock("24:00"), Some(86_400_000));
        assert_eq!(parse_clock("00:00:01"), Some(1000));
        assert_eq!(parse_clock("1:60"), None);
        assert_eq!(parse_clock("ab:00"), None);
    }

    #[test]
    fn minimal_resolves() {
        let s = load_scenario(MINIMAL, None).unwrap();
        assert_eq!(s.end_ms, 86_400_000);
        assert_eq!(s.participants[0].trace.trips[0].depart_ms, 66_600_000);
        assert_eq!(s.participants[0].fence.center, (43.65, -79.38));
        assert_eq!(s.participants[0].fence.hysteresis_m, 10.0);
        assert_eq!(s.links.ble.latency_ms, 20);
        assert_eq!(load_scenario(MINIMAL, Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn trip_beyond_duration_names_the_trip() {
        let text = MINIMAL.replace(r#""return": "22:30""#, r#""return": "25:00""#);
        let err = load_scenario(&text, None).unwrap_err().to_string();
        assert!(err.starts_with("participants[0].trips[0]:"), "{err}");
    }

    #[test]
    fn unknown_fields_report_their_path() {
        let text = MINIMAL.replace(r#""radius_m": 100"#, r#""radius_m": 100, "radius_km": 1"#);
        let err = load_scenario(&text, None).unwrap_err();
        match err {
            ScenarioError::Parse { path, .. } => assert_eq!(path, "participants[0].geofence.radius_km"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn missing_seed_is_an_error() {
        let text = MINIMAL.replace(r#""seed": 1,"#, "");
        assert!(load_scenario(&text, None).is_err());
    }

    #[test]
    fn faults_must_name_scenario_devices() {
        let text = MINIMAL.replace(
            r#""participants""#,
            r#""faults": [{"type": "drop_ack", "device": "p9-phone-0", "send": 1}], "participants""#,
        );
        let err = load_scenario(&text, None).unwrap_err().to_string();
        assert!(err.starts_with("faults[0].device"), "{err}");
        let text = MINIMAL.replace(
            r#""participants""#,
            r#""faults": [{"type": "expire_tokens", "device": "p1-phone-0", "poll": 1}], "participants""#,
        );
        assert!(load_scenario(&text, None).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ScenarioConfig::from_json(MINIMAL).unwrap();
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg);
    }
}

//! Circular home geofence with a hysteresis band.
//!
//! The phone only records location while the participant is outside the
//! fence. Exit requires `distance > radius + hysteresis`, re-entry requires
//! `distance <= radius - hysteresis`, so GPS jitter near the perimeter does
//! not produce enter/exit storms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FenceError {
    #[error("coordinate out of range: ({0}, {1})")]
    Coordinate(f64, f64),
    #[error("invalid geofence config: {0}")]
    Config(String),
    #[error("fix at {fix_ms} precedes state time {since_ms}")]
    NonMonotonic { fix_ms: i64, since_ms: i64 },
}

pub type LatLon = (f64, f64);

fn check_coord((lat, lon): LatLon) -> Result<(), FenceError> {
    if lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
        Ok(())
    } else {
        Err(FenceError::Coordinate(lat, lon))
    }
}

/// Great-circle distance in meters on a sphere of radius 6371 km.
pub fn haversine_distance(a: LatLon, b: LatLon) -> Result<f64, FenceError> {
    check_coord(a)?;
    check_coord(b)?;
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = (b.0 - a.0).to_radians();
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
}

fn default_hysteresis() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeofenceConfig {
    pub center: LatLon,
    pub radius_m: f64,
    #[serde(default = "default_hysteresis")]
    pub hysteresis_m: f64,
}

impl GeofenceConfig {
    pub fn validate(&self) -> Result<(), FenceError> {
        check_coord(self.center)?;
        if !(self.hysteresis_m.is_finite() && self.hysteresis_m >= 0.0 && self.radius_m > self.hysteresis_m) {
            return Err(FenceError::Config(format!(
                "need radius_m > hysteresis_m >= 0, got radius {} hysteresis {}",
                self.radius_m, self.hysteresis_m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inside,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Exit,
    Enter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub direction: Direction,
    pub t_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub lat: f64,
    pub lon: f64,
    pub t_ms: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeofenceState {
    pub region: Region,
    pub since_ms: i64,
    pub last_fix: Option<Fix>,
}

impl GeofenceState {
    /// State established by the first fix: inside iff within the bare radius.
    pub fn initial(fix: Fix, cfg: &GeofenceConfig) -> Result<Self, FenceError> {
        let d = haversine_distance(cfg.center, (fix.lat, fix.lon))?;
        let region = if d <= cfg.radius_m { Region::Inside } else { Region::Outside };
        Ok(Self { region, since_ms: fix.t_ms, last_fix: Some(fix) })
    }
}

/// Advances the automaton by one fix.
pub fn step_fence(
    state: &GeofenceState,
    fix: Fix,
    cfg: &GeofenceConfig,
) -> Result<(GeofenceState, Option<TransitionEvent>), FenceError> {
    let last_ms = state.last_fix.map_or(state.since_ms, |f| f.t_ms);
    if fix.t_ms < last_ms {
        return Err(FenceError::NonMonotonic { fix_ms: fix.t_ms, since_ms: last_ms });
    }
    let d = haversine_distance(cfg.center, (fix.lat, fix.lon))?;
    let next = match state.region {
        Region::Inside if d > cfg.radius_m + cfg.hysteresis_m => Some((Region::Outside, Direction::Exit)),
        Region::Outside if d <= cfg.radius_m - cfg.hysteresis_m => Some((Region::Inside, Direction::Enter)),
        _ => None,
    };
    Ok(match next {
        Some((region, direction)) => (
            GeofenceState { region, since_ms: fix.t_ms, last_fix: Some(fix) },
            Some(TransitionEvent { direction, t_ms: fix.t_ms }),
        ),
        None => (GeofenceState { last_fix: Some(fix), ..*state }, None),
    })
}

pub fn location_policy_gate(state: &GeofenceState) -> bool {
    state.region == Region::Outside
}

/// Owns the optional state for one participant: the first fix establishes
/// the region without an event, later fixes step the automaton.
#[derive(Debug, Clone)]
pub struct FenceTracker {
    cfg: GeofenceConfig,
    state: Option<GeofenceState>,
}

impl FenceTracker {
    pub fn new(cfg: GeofenceConfig) -> Self {
        Self { cfg, state: None }
    }

    pub fn state(&self) -> Option<&GeofenceState> {
        self.state.as_ref()
    }

    pub fn observe(&mut self, fix: Fix) -> Result<Option<TransitionEvent>, FenceError> {
        match &self.state {
            None => {
                self.state = Some(GeofenceState::initial(fix, &self.cfg)?);
                Ok(None)
            }
            Some(s) => {
                let (next, ev) = step_fence(s, fix, &self.cfg)?;
                self.state = Some(next);
                Ok(ev)
            }
        }
    }

    pub fn should_collect(&self) -> bool {
        self.state.as_ref().is_some_and(location_policy_gate)
    }
}

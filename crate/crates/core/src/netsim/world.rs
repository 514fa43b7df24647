//! The simulated world of one participant: where they are, what they are
//! doing, and which samples their devices emit as time advances.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{item_rng, stream_rng, SimError};
use crate::geofence::{FenceTracker, Fix, GeofenceConfig, LatLon, TransitionEvent};
use crate::model::{
    first_tick_at_or_after, tick_time, Accel, DeviceId, DeviceKind, HeartRate, Location, Modality, Payload,
    SamplingPolicy, SensorSample, SleepSummary, Steps, BPM_RANGE,
};

/// Mean gap between motion-sensor events while the participant is home and awake.
pub const MOTION_MEAN_GAP_MS: f64 = 120_000.0;

const METERS_PER_DEG: f64 = 111_194.926_644_558_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivityLevel {
    Rest,
    #[default]
    Light,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityWindow {
    pub start_ms: i64,
    pub end_ms: i64,
    pub level: ActivityLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub at_ms: i64,
    pub lat: f64,
    pub lon: f64,
}

/// A trip away from home. The path starts and ends at home; `waypoints`
/// are the intermediate points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub depart_ms: i64,
    pub return_ms: i64,
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTrace {
    pub participant: String,
    /// Scenario window `[start, end)`.
    pub window: (i64, i64),
    pub home: LatLon,
    pub trips: Vec<Trip>,
    pub activity: Vec<ActivityWindow>,
    pub sleep_windows: Vec<(i64, i64)>,
    /// Watch off the wrist.
    pub charging_windows: Vec<(i64, i64)>,
}

fn in_any(windows: &[(i64, i64)], t: i64) -> bool {
    windows.iter().any(|&(a, b)| a <= t && t < b)
}

fn check_coord(lat: f64, lon: f64) -> Result<(), String> {
    if !(lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)) {
        return Err(format!("coordinate ({lat}, {lon}) out of range"));
    }
    Ok(())
}

impl ParticipantTrace {
    /// Checks every schedule; errors carry a field path relative to the trace.
    pub fn validate(&self) -> Result<(), String> {
        let (start, end) = self.window;
        check_coord(self.home.0, self.home.1).map_err(|e| format!("home: {e}"))?;
        let within = |path: String, a: i64, b: i64| -> Result<(), String> {
            if a >= b {
                return Err(format!("{path}: start must precede end"));
            }
            if a < start || b > end {
                return Err(format!("{path}: [{a}, {b}) lies outside the scenario window [{start}, {end})"));
            }
            Ok(())
        };
        let mut prev_return = i64::MIN;
        for (i, trip) in self.trips.iter().enumerate() {
            within(format!("trips[{i}]"), trip.depart_ms, trip.return_ms)?;
            if trip.depart_ms < prev_return {
                return Err(format!("trips[{i}]: overlaps the previous trip"));
            }
            prev_return = trip.return_ms;
            let mut prev = trip.depart_ms;
            for (j, w) in trip.waypoints.iter().enumerate() {
                let path = format!("trips[{i}].waypoints[{j}]");
                check_coord(w.lat, w.lon).map_err(|e| format!("{path}: {e}"))?;
                if w.at_ms <= prev || w.at_ms >= trip.return_ms {
                    return Err(format!("{path}: at_ms must increase strictly between depart_ms and return_ms"));
                }
                prev = w.at_ms;
            }
        }
        for (i, a) in self.activity.iter().enumerate() {
            within(format!("activity[{i}]"), a.start_ms, a.end_ms)?;
        }
        for (i, &(a, b)) in self.sleep_windows.iter().enumerate() {
            within(format!("sleep_windows[{i}]"), a, b)?;
            if b >= end {
                return Err(format!("sleep_windows[{i}]: must end before the scenario ends"));
            }
        }
        for (i, &(a, b)) in self.charging_windows.iter().enumerate() {
            within(format!("charging_windows[{i}]"), a, b)?;
        }
        Ok(())
    }

    pub fn is_worn(&self, t: i64) -> bool {
        !in_any(&self.charging_windows, t)
    }

    pub fn is_asleep(&self, t: i64) -> bool {
        in_any(&self.sleep_windows, t)
    }

    pub fn is_home(&self, t: i64) -> bool {
        !self.trips.iter().any(|tr| tr.depart_ms < t && t < tr.return_ms)
    }

    /// Activity level at `t`: rest while asleep, otherwise the covering
    /// activity window, light by default.
    pub fn level_at(&self, t: i64) -> ActivityLevel {
        if self.is_asleep(t) {
            return ActivityLevel::Rest;
        }
        self.activity.iter().find(|a| a.start_ms <= t && t < a.end_ms).map_or(ActivityLevel::Light, |a| a.level)
    }
}

/// Where the participant is at `t`: home outside trips, linear
/// interpolation along the trip path inside one.
pub fn position_at(trace: &ParticipantTrace, t: i64) -> Result<LatLon, SimError> {
    let (start, end) = trace.window;
    if t < start || t > end {
        return Err(SimError::OutOfRange { t, start, end });
    }
    let Some(trip) = trace.trips.iter().find(|tr| tr.depart_ms < t && t < tr.return_ms) else {
        return Ok(trace.home);
    };
    let mut path = Vec::with_capacity(trip.waypoints.len() + 2);
    path.push((trip.depart_ms, trace.home));
    path.extend(trip.waypoints.iter().map(|w| (w.at_ms, (w.lat, w.lon))));
    path.push((trip.return_ms, trace.home));
    let i = path.partition_point(|&(at, _)| at <= t) - 1;
    let (t0, a) = path[i];
    if t == t0 {
        return Ok(a);
    }
    let (t1, b) = path[i + 1];
    let f = (t - t0) as f64 / (t1 - t0) as f64;
    Ok((a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f))
}

/// Ticks `(k, t)` of a periodic schedule anchored at `origin` falling in `[a, b)`.
pub fn periodic_ticks(origin: i64, hz: f64, window: (i64, i64)) -> impl Iterator<Item = (u64, i64)> {
    let first = first_tick_at_or_after(origin, hz, window.0);
    (first..).map(move |k| (k, tick_time(origin, hz, k))).take_while(move |&(_, t)| t < window.1)
}

/// Heart-rate sample times in `[a, b)`: bursts of `hr_burst_len_s` every
/// `hr_burst_period_s`, phase-aligned to `origin`. `k` numbers samples globally.
pub fn hr_ticks(origin: i64, policy: &SamplingPolicy, window: (i64, i64)) -> Vec<(u64, i64)> {
    let period = i64::from(policy.hr_burst_period_s) * 1000;
    let len = i64::from(policy.hr_burst_len_s) * 1000;
    let per_burst: Vec<i64> =
        (0..).map(|i| tick_time(0, policy.hr_in_burst_hz, i)).take_while(|&dt| dt < len).collect();
    let mut out = Vec::new();
    let mut j = (window.0 - origin).max(0) / period;
    loop {
        let burst = origin + j * period;
        if burst >= window.1 {
            break;
        }
        for (i, &dt) in per_burst.iter().enumerate() {
            let t = burst + dt;
            if t >= window.0 && t < window.1 {
                out.push((j as u64 * per_burst.len() as u64 + i as u64, t));
            }
        }
        j += 1;
    }
    out
}

pub fn steps_ticks(origin: i64, policy: &SamplingPolicy, window: (i64, i64)) -> impl Iterator<Item = (u64, i64)> {
    periodic_ticks(origin, 1.0 / f64::from(policy.steps_emission_period_s), window)
}

/// Motion-sensor event times over the whole scenario: an exponential-gap
/// process thinned to times when the participant is home and awake.
pub fn motion_schedule(trace: &ParticipantTrace, seed: u64) -> Vec<i64> {
    let mut rng = stream_rng(seed, &format!("{}/motion", trace.participant));
    let gap = Exp::new(1.0 / MOTION_MEAN_GAP_MS).expect("positive rate");
    let (mut t, end) = trace.window;
    let mut out = Vec::new();
    loop {
        t += (gap.sample(&mut rng) as i64).max(1);
        if t >= end {
            return out;
        }
        if trace.is_home(t) && !trace.is_asleep(t) {
            out.push(t);
        }
    }
}

fn jittered(p: LatLon, jitter_m: f64, rng: &mut impl Rng) -> LatLon {
    if jitter_m <= 0.0 {
        return p;
    }
    let n = Normal::new(0.0, jitter_m).expect("finite jitter");
    let dy: f64 = n.sample(rng);
    let dx: f64 = n.sample(rng);
    let lat = (p.0 + dy / METERS_PER_DEG).clamp(-90.0, 90.0);
    let lon = p.1 + dx / (METERS_PER_DEG * p.0.to_radians().cos().max(1e-6));
    (lat, lon.clamp(-180.0, 180.0))
}

/// Runs the geofence over the phone's fix schedule. Fixes are evaluated at
/// `fence_eval_hz`; a location sample is due at each location tick while
/// the automaton says Outside. A fence tick sharing a timestamp with a
/// location tick is evaluated first.
#[derive(Debug, Clone)]
pub struct FenceSchedule {
    tracker: FenceTracker,
    jitter_m: f64,
}

impl FenceSchedule {
    pub fn new(cfg: GeofenceConfig, jitter_m: f64) -> Self {
        Self { tracker: FenceTracker::new(cfg), jitter_m }
    }

    /// Advances over `[a, b)`, calling `on_location(k, t)` for each due
    /// location tick. Returns the transitions in order.
    pub fn advance(
        &mut self,
        trace: &ParticipantTrace,
        policy: &SamplingPolicy,
        seed: u64,
        window: (i64, i64),
        mut on_location: impl FnMut(u64, i64),
    ) -> Result<Vec<TransitionEvent>, SimError> {
        let origin = trace.window.0;
        let stream = format!("{}/gps", trace.participant);
        let mut fence = periodic_ticks(origin, policy.fence_eval_hz(), window).peekable();
        let mut loc = periodic_ticks(origin, policy.location_hz, window).peekable();
        let mut transitions = Vec::new();
        loop {
            let take_fence = match (fence.peek(), loc.peek()) {
                (None, None) => return Ok(transitions),
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (Some(&(_, tf)), Some(&(_, tl))) => tf <= tl,
            };
            if take_fence {
                let (k, t) = fence.next().expect("peeked");
                let mut rng = item_rng(seed, &stream, k);
                let (lat, lon) = jittered(position_at(trace, t)?, self.jitter_m, &mut rng);
                let ev = self.tracker.observe(Fix { lat, lon, t_ms: t }).expect("positions are valid and monotonic");
                transitions.extend(ev);
            } else {
                let (k, t) = loc.next().expect("peeked");
                if self.tracker.should_collect() {
                    on_location(k, t);
                }
            }
        }
    }
}

/// Replays the fence over the whole scenario: transitions plus the times
/// at which location samples are due.
pub fn fence_replay(
    trace: &ParticipantTrace,
    policy: &SamplingPolicy,
    cfg: GeofenceConfig,
    jitter_m: f64,
    seed: u64,
) -> (Vec<TransitionEvent>, Vec<i64>) {
    let mut sched = FenceSchedule::new(cfg, jitter_m);
    let mut times = Vec::new();
    let transitions =
        sched.advance(trace, policy, seed, trace.window, |_, t| times.push(t)).expect("window is within the trace");
    (transitions, times)
}

/// Output of one emission window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Emissions {
    /// Sorted by `(t_ms, device, modality, seq)`.
    pub samples: Vec<SensorSample>,
    pub transitions: Vec<TransitionEvent>,
}

/// Generates one participant's samples window by window.
///
/// Phone: location. Watch: accel, heart rate, steps (only while worn).
/// Motion sensor and mattress: motion events and sleep sessions, numbered
/// from 1 as their vendor clouds would.
pub struct Emitter {
    seed: u64,
    trace: ParticipantTrace,
    policy: SamplingPolicy,
    fence: FenceSchedule,
    jitter_m: f64,
    phone: DeviceId,
    watch: DeviceId,
    motion: DeviceId,
    sleep: DeviceId,
    cursor: i64,
    seqs: BTreeMap<Modality, u64>,
    motion_times: Vec<i64>,
    sleep_by_end: Vec<(i64, i64)>,
}

impl Emitter {
    pub fn new(
        seed: u64,
        trace: ParticipantTrace,
        policy: SamplingPolicy,
        fence: GeofenceConfig,
        jitter_m: f64,
    ) -> Result<Self, String> {
        let dev = |kind| DeviceId::new(&trace.participant, kind, 0).map_err(|e| e.to_string());
        let (phone, watch, motion, sleep) =
            (dev(DeviceKind::Phone)?, dev(DeviceKind::Watch)?, dev(DeviceKind::Motion)?, dev(DeviceKind::Sleep)?);
        let motion_times = motion_schedule(&trace, seed);
        let mut sleep_by_end = trace.sleep_windows.clone();
        sleep_by_end.sort_by_key(|&(a, b)| (b, a));
        Ok(Self {
            seed,
            cursor: trace.window.0,
            fence: FenceSchedule::new(fence, jitter_m),
            jitter_m,
            trace,
            policy,
            phone,
            watch,
            motion,
            sleep,
            seqs: BTreeMap::new(),
            motion_times,
            sleep_by_end,
        })
    }

    pub fn trace(&self) -> &ParticipantTrace {
        &self.trace
    }

    pub fn cursor(&self) -> i64 {
        self.cursor
    }

    pub fn device(&self, kind: DeviceKind) -> &DeviceId {
        match kind {
            DeviceKind::Phone => &self.phone,
            DeviceKind::Watch => &self.watch,
            DeviceKind::Motion => &self.motion,
            DeviceKind::Sleep => &self.sleep,
        }
    }

    fn next_seq(&mut self, m: Modality) -> u64 {
        let e = self.seqs.entry(m).or_insert(0);
        *e += 1;
        *e - 1
    }

    fn stream(&self, name: &str) -> String {
        format!("{}/{name}", self.trace.participant)
    }

    /// Emits everything scheduled in `[t0, t1)`, clipped to the scenario
    /// window. Windows must be consecutive: `t0` is where the last one ended.
    pub fn next_emissions(&mut self, window: (i64, i64)) -> Result<Emissions, SimError> {
        let (t0, t1) = window;
        if t0 != self.cursor || t1 < t0 {
            return Err(SimError::Causality { at: t0, now: self.cursor });
        }
        self.cursor = t1;
        let (start, end) = self.trace.window;
        let w = (t0.max(start), t1.min(end));
        if w.0 >= w.1 {
            return Ok(Emissions::default());
        }
        let mut samples = Vec::new();

        let mut loc_ticks = Vec::new();
        let transitions = {
            let (trace, policy, seed) = (&self.trace, &self.policy, self.seed);
            self.fence.advance(trace, policy, seed, w, |k, t| loc_ticks.push((k, t)))?
        };
        let loc_stream = self.stream("location");
        for (k, t) in loc_ticks {
            let mut rng = item_rng(self.seed, &loc_stream, k);
            let (lat_deg, lon_deg) = jittered(position_at(&self.trace, t)?, self.jitter_m, &mut rng);
            let seq = self.next_seq(Modality::Location);
            samples.push(SensorSample {
                device: self.phone.clone(),
                seq,
                t_ms: t,
                payload: Payload::Location(Location { lat_deg, lon_deg }),
            });
        }

        let accel_stream = self.stream("accel");
        let accel: Vec<_> = periodic_ticks(start, self.policy.accel_hz, w).filter(|&(_, t)| self.trace.is_worn(t)).collect();
        for (k, t) in accel {
            let payload = accel_payload(self.trace.level_at(t), &mut item_rng(self.seed, &accel_stream, k));
            let seq = self.next_seq(Modality::Accel);
            samples.push(SensorSample { device: self.watch.clone(), seq, t_ms: t, payload });
        }

        let hr_stream = self.stream("heart_rate");
        for (k, t) in hr_ticks(start, &self.policy, w) {
            if !self.trace.is_worn(t) {
                continue;
            }
            let payload = hr_payload(self.trace.level_at(t), &mut item_rng(self.seed, &hr_stream, k));
            let seq = self.next_seq(Modality::HeartRate);
            samples.push(SensorSample { device: self.watch.clone(), seq, t_ms: t, payload });
        }

        let steps_stream = self.stream("steps");
        let steps: Vec<_> = steps_ticks(start, &self.policy, w).filter(|&(_, t)| self.trace.is_worn(t)).collect();
        for (k, t) in steps {
            let payload = steps_payload(self.trace.level_at(t), &mut item_rng(self.seed, &steps_stream, k));
            let seq = self.next_seq(Modality::Steps);
            samples.push(SensorSample { device: self.watch.clone(), seq, t_ms: t, payload });
        }

        let from = self.motion_times.partition_point(|&t| t < w.0);
        for (i, &t) in self.motion_times.iter().enumerate().skip(from).take_while(|&(_, &t)| t < w.1) {
            samples.push(SensorSample { device: self.motion.clone(), seq: i as u64 + 1, t_ms: t, payload: Payload::MotionEvent });
        }

        let sleep_stream = self.stream("sleep");
        for (i, &(a, b)) in self.sleep_by_end.iter().enumerate() {
            if b >= w.0 && b < w.1 {
                let payload = sleep_payload(a, b, &mut item_rng(self.seed, &sleep_stream, i as u64));
                samples.push(SensorSample { device: self.sleep.clone(), seq: i as u64 + 1, t_ms: b, payload });
            }
        }

        samples.sort_by(|x, y| {
            (x.t_ms, x.device.to_string(), x.modality(), x.seq).cmp(&(y.t_ms, y.device.to_string(), y.modality(), y.seq))
        });
        Ok(Emissions { samples, transitions })
    }
}

fn accel_payload(level: ActivityLevel, rng: &mut impl Rng) -> Payload {
    let sigma = match level {
        ActivityLevel::Rest => 0.02,
        ActivityLevel::Light => 0.15,
        ActivityLevel::Active => 0.4,
    };
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    Payload::Accel(Accel { ax_g: n.sample(rng), ay_g: n.sample(rng), az_g: 1.0 + n.sample(rng) })
}

fn hr_payload(level: ActivityLevel, rng: &mut impl Rng) -> Payload {
    let base = match level {
        ActivityLevel::Rest => 60.0,
        ActivityLevel::Light => 75.0,
        ActivityLevel::Active => 95.0,
    };
    let noise: f64 = Normal::new(0.0, 3.0).expect("positive sigma").sample(rng);
    Payload::HeartRate(HeartRate { bpm: (base + noise).clamp(BPM_RANGE.0, BPM_RANGE.1) })
}

fn steps_payload(level: ActivityLevel, rng: &mut impl Rng) -> Payload {
    let step_count = match level {
        ActivityLevel::Rest => 0,
        ActivityLevel::Light => rng.random_range(20..=60),
        ActivityLevel::Active => rng.random_range(90..=130),
    };
    Payload::Steps(Steps { step_count })
}

fn sleep_payload(start_ms: i64, end_ms: i64, rng: &mut impl Rng) -> Payload {
    let span_s = ((end_ms - start_ms) / 1000) as f64;
    let total = (span_s * rng.random_range(0.80..0.95)).floor();
    let deep = (total * rng.random_range(0.15..0.30)).floor();
    let snoring = (total * rng.random_range(0.0..0.10)).floor();
    let avg_hr_bpm = (rng.random_range(50.0..62.0_f64) * 10.0).round() / 10.0;
    Payload::SleepSession(SleepSummary {
        start_ms,
        end_ms,
        total_sleep_s: total as u32,
        deep_sleep_s: deep as u32,
        avg_hr_bpm,
        snoring_s: snoring as u32,
    })
}

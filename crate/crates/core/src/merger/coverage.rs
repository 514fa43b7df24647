//! Observed versus expected sample counts and gap statistics.
//!
//! Expected counts come from the scenario's schedules in closed form:
//! periodic ticks while the watch is worn for accel, heart rate and steps,
//! the geofence replay for location, the motion process for motion events
//! and one session per sleep window. Notifications have no expected count.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{find_gaps, local_clock, MergedSegmentFile};
use crate::edge::WEAR_NOTIFICATION_KIND;
use crate::geofence::{Direction, TransitionEvent};
use crate::model::{segment_of, DeviceKind, Modality, Payload, SegmentLength, SensorSample};
use crate::netsim::world::{fence_replay, hr_ticks, motion_schedule, periodic_ticks, steps_ticks};
use crate::scenario::{Participant, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCoverage {
    pub modality: Modality,
    pub segment_start_ms: i64,
    pub segment_end_ms: i64,
    pub observed_count: u64,
    pub expected_count: Option<u64>,
    pub coverage_ratio: Option<f64>,
    /// `[start_ms, end_ms)` intervals without samples longer than the gap limit.
    pub gaps: Vec<(i64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SleepWindowCheck {
    pub start_ms: i64,
    pub end_ms: i64,
    pub motion_events: u64,
    /// Sleep-session rows whose start and end match the window.
    pub matching_sessions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargingWindowCheck {
    pub start_ms: i64,
    pub end_ms: i64,
    pub watch_rows: u64,
    pub accel_expected_if_worn: u64,
    pub wear_notifications: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantCoverage {
    pub participant: String,
    pub totals: BTreeMap<Modality, u64>,
    pub transitions: Vec<TransitionEvent>,
    pub segments: Vec<SegmentCoverage>,
    pub sleep_windows: Vec<SleepWindowCheck>,
    pub charging_windows: Vec<ChargingWindowCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub seed: u64,
    pub start_ms: i64,
    pub end_ms: i64,
    pub utc_offset_min: i32,
    pub segment: SegmentLength,
    pub gap_threshold_ms: i64,
    pub participants: Vec<ParticipantCoverage>,
}

impl CoverageReport {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

fn count_in(times: &[i64], w: (i64, i64)) -> u64 {
    times.iter().filter(|&&t| t >= w.0 && t < w.1).count() as u64
}

fn expected_times(p: &Participant, m: Modality, location: &[i64], motion: &[i64]) -> Option<Vec<i64>> {
    let tr = &p.trace;
    let origin = tr.window.0;
    let worn = |it: Vec<(u64, i64)>| it.into_iter().map(|(_, t)| t).filter(|&t| tr.is_worn(t)).collect();
    Some(match m {
        Modality::Location => location.to_vec(),
        Modality::Accel => worn(periodic_ticks(origin, p.policy.accel_hz, tr.window).collect()),
        Modality::HeartRate => worn(hr_ticks(origin, &p.policy, tr.window)),
        Modality::Steps => worn(steps_ticks(origin, &p.policy, tr.window).collect()),
        Modality::MotionEvent => motion.to_vec(),
        Modality::SleepSession => {
            let mut ends: Vec<i64> = tr.sleep_windows.iter().map(|&(_, b)| b).collect();
            ends.sort_unstable();
            ends
        }
        Modality::Notification => return None,
    })
}

/// Expected spacing for gap detection; `None` for modalities whose
/// schedule is not periodic.
fn gap_period_ms(p: &Participant, m: Modality) -> Option<i64> {
    match m {
        Modality::Accel => Some((1000.0 / p.policy.accel_hz).round() as i64),
        Modality::HeartRate => Some(i64::from(p.policy.hr_burst_period_s) * 1000),
        Modality::Steps => Some(i64::from(p.policy.steps_emission_period_s) * 1000),
        _ => None,
    }
}

fn is_wear_notification(s: &SensorSample) -> bool {
    matches!(&s.payload, Payload::Notification(n) if n.kind == WEAR_NOTIFICATION_KIND)
}

/// Builds the report for `scenario` from merged files.
pub fn coverage_report(files: &[MergedSegmentFile], scenario: &Scenario) -> CoverageReport {
    let (start, end) = scenario.window();
    let participants = scenario
        .participants
        .iter()
        .map(|p| {
            let mine: Vec<&MergedSegmentFile> = files.iter().filter(|f| f.participant == p.id).collect();
            let rows_of = |m: Modality| mine.iter().filter(move |f| f.segment.modality == m).flat_map(|f| f.rows.iter());
            let (transitions, location) =
                fence_replay(&p.trace, &p.policy, p.fence, p.gps_jitter_m, scenario.seed);
            let motion = motion_schedule(&p.trace, scenario.seed);

            let mut totals = BTreeMap::new();
            let mut segments = Vec::new();
            for m in Modality::ALL {
                let observed: Vec<i64> = rows_of(m).map(|s| s.t_ms).collect();
                totals.insert(m, observed.len() as u64);
                let expected = expected_times(p, m, &location, &motion);
                let mut seg = segment_of(start, scenario.segment, scenario.utc_offset_min);
                while seg < end {
                    let seg_end = seg + scenario.segment.ms();
                    let w = (seg.max(start), seg_end.min(end));
                    let mut times: Vec<i64> = observed.iter().copied().filter(|&t| t >= w.0 && t < w.1).collect();
                    times.sort_unstable();
                    let expected_count = expected.as_ref().map(|e| count_in(e, w));
                    let coverage_ratio = expected_count.filter(|&e| e > 0).map(|e| times.len() as f64 / e as f64);
                    let gaps = gap_period_ms(p, m)
                        .map(|period| find_gaps(&times, w, period, scenario.gap_threshold_ms))
                        .unwrap_or_default();
                    segments.push(SegmentCoverage {
                        modality: m,
                        segment_start_ms: seg,
                        segment_end_ms: seg_end,
                        observed_count: times.len() as u64,
                        expected_count,
                        coverage_ratio,
                        gaps,
                    });
                    seg = seg_end;
                }
            }

            let sleep_windows = p
                .trace
                .sleep_windows
                .iter()
                .map(|&(a, b)| SleepWindowCheck {
                    start_ms: a,
                    end_ms: b,
                    motion_events: rows_of(Modality::MotionEvent).filter(|s| s.t_ms >= a && s.t_ms < b).count() as u64,
                    matching_sessions: rows_of(Modality::SleepSession)
                        .filter(|s| matches!(&s.payload, Payload::SleepSession(x) if x.start_ms == a && x.end_ms == b))
                        .count() as u64,
                })
                .collect();

            let charging_windows = p
                .trace
                .charging_windows
                .iter()
                .map(|&(a, b)| {
                    let inside = |s: &&SensorSample| s.t_ms >= a && s.t_ms < b;
                    ChargingWindowCheck {
                        start_ms: a,
                        end_ms: b,
                        watch_rows: mine
                            .iter()
                            .flat_map(|f| f.rows.iter())
                            .filter(|s| s.device.kind() == DeviceKind::Watch)
                            .filter(inside)
                            .count() as u64,
                        accel_expected_if_worn: periodic_ticks(start, p.policy.accel_hz, (a, b)).count() as u64,
                        wear_notifications: rows_of(Modality::Notification)
                            .filter(|s| is_wear_notification(s))
                            .filter(inside)
                            .count() as u64,
                    }
                })
                .collect();

            ParticipantCoverage { participant: p.id.clone(), totals, transitions, segments, sleep_windows, charging_windows }
        })
        .collect();
    CoverageReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        start_ms: start,
        end_ms: end,
        utc_offset_min: scenario.utc_offset_min,
        segment: scenario.segment,
        gap_threshold_ms: scenario.gap_threshold_ms,
        participants,
    }
}

fn duration(ms: i64) -> String {
    let s = ms / 1000;
    format!("{}h{:02}m{:02}s", s / 3600, (s / 60) % 60, s % 60)
}

/// Plain-text summary with local clock times; same report, same bytes.
pub fn render_text(r: &CoverageReport) -> String {
    let off = r.utc_offset_min;
    let clock = |t: i64| local_clock(t, off);
    let mut out = String::new();
    let _ = writeln!(out, "scenario {} (seed {})", r.scenario, r.seed);
    let _ = writeln!(out, "window {} .. {} (UTC{:+03}:{:02})", clock(r.start_ms), clock(r.end_ms), off / 60, (off % 60).abs());
    let _ = writeln!(out, "segments: {}, gap threshold {} ms", r.segment.as_str(), r.gap_threshold_ms);
    for p in &r.participants {
        let _ = writeln!(out, "\nparticipant {}", p.participant);
        let _ = writeln!(out, "  rows per modality:");
        for (m, n) in &p.totals {
            let _ = writeln!(out, "    {:<14} {n}", m.as_str());
        }
        let _ = writeln!(out, "  fence transitions:");
        if p.transitions.is_empty() {
            let _ = writeln!(out, "    none");
        }
        for t in &p.transitions {
            let dir = match t.direction {
                Direction::Exit => "Exit ",
                Direction::Enter => "Enter",
            };
            let _ = writeln!(out, "    {dir} {}", clock(t.t_ms));
        }
        let _ = writeln!(out, "  coverage:");
        for s in &p.segments {
            if s.observed_count == 0 && s.expected_count.unwrap_or(0) == 0 {
                continue;
            }
            let expected = s.expected_count.map_or("-".to_string(), |e| e.to_string());
            let ratio = s.coverage_ratio.map_or("-".to_string(), |c| format!("{c:.4}"));
            let _ = writeln!(
                out,
                "    {:<14} {}  observed {:>6}  expected {:>6}  ratio {ratio}",
                s.modality.as_str(),
                clock(s.segment_start_ms),
                s.observed_count,
                expected
            );
            for &(a, b) in &s.gaps {
                let _ = writeln!(out, "      gap {} .. {} ({})", clock(a), clock(b), duration(b - a));
            }
        }
        for w in &p.sleep_windows {
            let _ = writeln!(
                out,
                "  sleep {} .. {}: {} motion events during sleep, {} matching sleep session(s)",
                clock(w.start_ms),
                clock(w.end_ms),
                w.motion_events,
                w.matching_sessions
            );
        }
        for w in &p.charging_windows {
            let _ = writeln!(
                out,
                "  charging {} .. {}: {} watch rows (accel expected if worn {}), {} wear notification(s)",
                clock(w.start_ms),
                clock(w.end_ms),
                w.watch_rows,
                w.accel_expected_if_worn,
                w.wear_notifications
            );
        }
    }
    out
}

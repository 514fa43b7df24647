//! Turns the staging set into one CSV per participant, modality and time
//! segment, plus coverage statistics.
//!
//! Merging is a pure function of the sample *set*: input order and exact
//! duplicates do not matter, and re-running over the same staging produces
//! byte-identical files. Output layout:
//!
//! ```text
//! <out>/<participant>/<modality>/<YYYY-MM-DDTHH-MM>.csv   segment start, scenario-local time
//! <out>/.manifest                                        files written by the last merge
//! <out>/.merge.lock                                      present while a merge runs
//! ```

pub mod coverage;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use thiserror::Error;

use crate::model::{segment_of, validate_sample, Modality, Payload, SampleKey, SegmentId, SegmentLength, SensorSample};

pub use self::coverage::{coverage_report, CoverageReport};

const LOCK_FILE: &str = ".merge.lock";
const MANIFEST_FILE: &str = ".manifest";

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("staging holds invalid samples: {}", .0.join("; "))]
    InvalidSamples(Vec<String>),
    #[error("key {0} appears with two different payloads")]
    Conflict(SampleKey),
    #[error("output {0} is locked by another merge (remove the lock file if no merge is running)")]
    Locked(PathBuf),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> MergeError + '_ {
    move |source| MergeError::Io { path: path.to_path_buf(), source }
}

/// CSV header for each modality, in column order.
pub fn csv_header(m: Modality) -> &'static [&'static str] {
    match m {
        Modality::Location => &["t_ms", "device", "seq", "lat_deg", "lon_deg"],
        Modality::Accel => &["t_ms", "device", "seq", "ax_g", "ay_g", "az_g"],
        Modality::HeartRate => &["t_ms", "device", "seq", "bpm"],
        Modality::Steps => &["t_ms", "device", "seq", "step_count"],
        Modality::MotionEvent => &["t_ms", "device", "seq"],
        Modality::SleepSession => {
            &["t_ms", "device", "seq", "start_ms", "end_ms", "total_sleep_s", "deep_sleep_s", "avg_hr_bpm", "snoring_s"]
        }
        Modality::Notification => &["t_ms", "device", "seq", "kind"],
    }
}

/// `YYYY-MM-DDTHH-MM` of `t_ms` in the local time given by `utc_offset_min`.
pub fn local_stamp(t_ms: i64, utc_offset_min: i32) -> String {
    local_datetime(t_ms, utc_offset_min).format("%Y-%m-%dT%H-%M").to_string()
}

/// `YYYY-MM-DD HH:MM:SS` local.
pub fn local_clock(t_ms: i64, utc_offset_min: i32) -> String {
    local_datetime(t_ms, utc_offset_min).format("%Y-%m-%d %H:%M:%S").to_string()
}

fn local_datetime(t_ms: i64, utc_offset_min: i32) -> DateTime<FixedOffset> {
    let offset = FixedOffset::east_opt(utc_offset_min * 60).expect("offset within a day");
    DateTime::from_timestamp_millis(t_ms).expect("timestamp in chrono range").with_timezone(&offset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedSegmentFile {
    pub participant: String,
    pub segment: SegmentId,
    pub utc_offset_min: i32,
    /// Sorted by `(t_ms, device, seq)`, one row per key.
    pub rows: Vec<SensorSample>,
}

impl MergedSegmentFile {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(&self.participant)
            .join(self.segment.modality.as_str())
            .join(format!("{}.csv", local_stamp(self.segment.start_ms, self.utc_offset_min)))
    }
}

/// Partitions samples by participant, modality and segment, dedups by key
/// and sorts each partition.
pub fn merge(
    samples: impl IntoIterator<Item = SensorSample>,
    length: SegmentLength,
    utc_offset_min: i32,
) -> Result<Vec<MergedSegmentFile>, MergeError> {
    let mut by_key: BTreeMap<SampleKey, SensorSample> = BTreeMap::new();
    let mut offenders = Vec::new();
    for s in samples {
        let v = validate_sample(&s);
        if !v.is_empty() {
            offenders.push(format!("{}: {}", s.key(), v.join(", ")));
            continue;
        }
        match by_key.get(&s.key()) {
            Some(prev) if *prev != s => return Err(MergeError::Conflict(s.key())),
            Some(_) => {}
            None => {
                by_key.insert(s.key(), s);
            }
        }
    }
    if !offenders.is_empty() {
        return Err(MergeError::InvalidSamples(offenders));
    }
    let mut parts: BTreeMap<(String, Modality, i64), Vec<SensorSample>> = BTreeMap::new();
    for s in by_key.into_values() {
        let seg = segment_of(s.t_ms, length, utc_offset_min);
        parts.entry((s.device.participant().to_string(), s.modality(), seg)).or_default().push(s);
    }
    Ok(parts
        .into_iter()
        .map(|((participant, modality, start_ms), mut rows)| {
            rows.sort_by_cached_key(|s| (s.t_ms, s.device.to_string(), s.seq));
            MergedSegmentFile { participant, segment: SegmentId { modality, start_ms, length }, utc_offset_min, rows }
        })
        .collect())
}

fn row_fields(s: &SensorSample) -> Vec<String> {
    let mut f = vec![s.t_ms.to_string(), s.device.to_string(), s.seq.to_string()];
    match &s.payload {
        Payload::Location(p) => f.extend([format!("{:.6}", p.lat_deg), format!("{:.6}", p.lon_deg)]),
        Payload::Accel(p) => f.extend([format!("{:.4}", p.ax_g), format!("{:.4}", p.ay_g), format!("{:.4}", p.az_g)]),
        Payload::HeartRate(p) => f.push(format!("{:.1}", p.bpm)),
        Payload::Steps(p) => f.push(p.step_count.to_string()),
        Payload::MotionEvent => {}
        Payload::SleepSession(p) => f.extend([
            p.start_ms.to_string(),
            p.end_ms.to_string(),
            p.total_sleep_s.to_string(),
            p.deep_sleep_s.to_string(),
            format!("{:.1}", p.avg_hr_bpm),
            p.snoring_s.to_string(),
        ]),
        Payload::Notification(n) => f.push(n.kind.clone()),
    }
    f
}

/// Renders the file: header, one line per row, `\n` endings.
pub fn write_csv(file: &MergedSegmentFile) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(csv_header(file.segment.modality)).expect("writing to a Vec cannot fail");
    for s in &file.rows {
        w.write_record(row_fields(s)).expect("writing to a Vec cannot fail");
    }
    w.into_inner().expect("flushing a Vec cannot fail")
}

/// Parses a merged CSV back into `(t_ms, key)` pairs; used by tests and reports.
pub fn read_csv_keys(path: &Path, modality: Modality) -> Result<Vec<(i64, SampleKey)>, MergeError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MergeError::Io { path: path.to_path_buf(), source: e.into() })?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| MergeError::Io { path: path.to_path_buf(), source: e.into() })?;
        let bad = || MergeError::Io { path: path.to_path_buf(), source: io::Error::new(io::ErrorKind::InvalidData, "bad row") };
        let t: i64 = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let device = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let seq: u64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.push((t, crate::model::make_sample_key(&device, modality, seq)));
    }
    Ok(out)
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteSummary {
    pub files: usize,
    pub rewritten: usize,
    pub removed: usize,
}

/// Writes merged files under `out_dir`, replacing the previous merge's
/// output wholesale: files whose bytes are unchanged are left untouched and
/// files the previous merge wrote but this one did not are removed.
pub fn write_merged(out_dir: &Path, files: &[MergedSegmentFile]) -> Result<WriteSummary, MergeError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let lock_path = out_dir.join(LOCK_FILE);
    match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(MergeError::Locked(lock_path)),
        Err(e) => return Err(io_err(&lock_path)(e)),
    }
    let _guard = LockGuard(lock_path);

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let previous: Vec<String> = match fs::read_to_string(&manifest_path) {
        Ok(s) => s.lines().map(str::to_string).collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&manifest_path)(e)),
    };
    let mut summary = WriteSummary { files: files.len(), ..Default::default() };
    let mut current = Vec::with_capacity(files.len());
    for f in files {
        let rel = f.relative_path();
        let path = out_dir.join(&rel);
        let bytes = write_csv(f);
        current.push(rel.to_string_lossy().replace('\\', "/"));
        if fs::read(&path).is_ok_and(|old| old == bytes) {
            continue;
        }
        let dir = path.parent().expect("merged files live in a directory");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("csv.tmp");
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        summary.rewritten += 1;
    }
    current.sort();
    for stale in previous.iter().filter(|p| current.binary_search(p).is_err()) {
        let path = out_dir.join(stale);
        match fs::remove_file(&path) {
            Ok(()) => summary.removed += 1,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&path)(e)),
        }
    }
    let mut manifest = current.join("\n");
    if !manifest.is_empty() {
        manifest.push('\n');
    }
    if fs::read_to_string(&manifest_path).ok().as_deref() != Some(manifest.as_str()) {
        fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    }
    Ok(summary)
}

/// Intervals `[a, b)` between consecutive sample times, or between a
/// window edge and the nearest sample, longer than
/// `max(threshold_ms, expected_period_ms)`. `times` must be sorted.
pub fn find_gaps(times: &[i64], window: (i64, i64), expected_period_ms: i64, threshold_ms: i64) -> Vec<(i64, i64)> {
    let limit = threshold_ms.max(expected_period_ms);
    let inside = times.iter().copied().filter(|&t| t >= window.0 && t < window.1);
    let points = std::iter::once(window.0).chain(inside).chain(std::iter::once(window.1));
    let mut gaps = Vec::new();
    let mut prev = None;
    for t in points {
        if let Some(p) = prev {
            if t - p > limit {
                gaps.push((p, t));
            }
        }
        prev = Some(t);
    }
    gaps
}

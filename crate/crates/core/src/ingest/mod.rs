//! Central ingest: accepts batches, deduplicates by sample key and persists
//! accepted samples to an append-only staging area.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! staging/<device>.ndjson   accepted samples, one canonical sample per line
//! journal.ndjson            one line per committed batch (ack + staging offset)
//! snapshots/<n>.json        keys added since snapshot n-1, plus staging offsets
//! meta.json                 optional store metadata (scenario utc offset)
//! ```
//!
//! A batch commits when its journal line is written. On open, staging files
//! are truncated back to the last journaled offset so a crash between the
//! staging append and the journal write leaves no half-accepted batch. The
//! dedup set is rebuilt from snapshots plus a scan of the staging tail.

pub mod http;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeviceId, Modality, SampleKey, SensorSample};
use crate::protocol::{Ack, AckStatus, BatchEnvelope, DEFAULT_MAX_BATCH};

/// A new key snapshot is cut after this many keys.
pub const SNAPSHOT_EVERY_KEYS: usize = 10_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt staging record at {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("journal at {path} references {expected} bytes of {device} staging but only {actual} exist")]
    MissingStaging { path: PathBuf, device: String, expected: u64, actual: u64 },
    #[error("staging directory {0} does not exist")]
    NoStore(PathBuf),
    #[error("injected crash at {0:?}")]
    InjectedCrash(Failpoint),
    #[error("transport: {0}")]
    Transport(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

/// Crash points for fault-injection tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failpoint {
    /// Staging lines written, journal line not.
    AfterStagingWrite,
}

/// Anything that accepts batches and answers with an ack.
pub trait IngestSink {
    fn submit(&self, env: &BatchEnvelope) -> Result<Ack, IngestError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JournalEntry {
    #[serde(flatten)]
    ack: Ack,
    device: DeviceId,
    /// Staging file length for `device` once this batch's lines are written.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    offsets: BTreeMap<DeviceId, u64>,
    keys: Vec<SampleKey>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct StoreMeta {
    pub utc_offset_min: Option<i32>,
}

#[derive(Debug, Clone, Default)]
pub struct StagingFilter {
    pub device: Option<DeviceId>,
    pub modality: Option<Modality>,
    /// Half-open `[from, to)` on `t_ms`.
    pub time_range: Option<(i64, i64)>,
}

impl StagingFilter {
    fn matches(&self, s: &SensorSample) -> bool {
        self.device.as_ref().is_none_or(|d| *d == s.device)
            && self.modality.is_none_or(|m| m == s.modality())
            && self.time_range.is_none_or(|(a, b)| s.t_ms >= a && s.t_ms < b)
    }
}

struct Inner {
    root: PathBuf,
    keys: HashSet<SampleKey>,
    journal: BTreeMap<String, Ack>,
    journal_file: File,
    offsets: BTreeMap<DeviceId, u64>,
    files: HashMap<DeviceId, File>,
    unsnapshotted: Vec<SampleKey>,
    snapshot_count: u64,
    failpoint: Option<Failpoint>,
    max_batch: usize,
}

pub struct StagingStore {
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for StagingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StagingStore").field("root", &self.root()).finish_non_exhaustive()
    }
}

fn staging_path(root: &Path, device: &DeviceId) -> PathBuf {
    root.join("staging").join(format!("{device}.ndjson"))
}

impl StagingStore {
    /// Opens or creates a store, reconciling staging with the journal.
    pub fn open(root: &Path) -> Result<Self, IngestError> {
        fs::create_dir_all(root.join("staging")).map_err(io_err(root))?;
        fs::create_dir_all(root.join("snapshots")).map_err(io_err(root))?;
        Self::open_inner(root)
    }

    /// Opens an existing store; fails if `root` was never initialised.
    pub fn open_existing(root: &Path) -> Result<Self, IngestError> {
        if !root.join("staging").is_dir() {
            return Err(IngestError::NoStore(root.to_path_buf()));
        }
        Self::open(root)
    }

    fn open_inner(root: &Path) -> Result<Self, IngestError> {
        let journal_path = root.join("journal.ndjson");
        let mut journal = BTreeMap::new();
        let mut offsets: BTreeMap<DeviceId, u64> = BTreeMap::new();
        let valid_len = read_journal(&journal_path, |e| {
            let off = offsets.entry(e.device.clone()).or_insert(0);
            *off = (*off).max(e.offset);
            journal.insert(e.ack.batch_id.clone(), e.ack);
        })?;
        let journal_file = OpenOptions::new().create(true).append(true).open(&journal_path).map_err(io_err(&journal_path))?;
        journal_file.set_len(valid_len).map_err(io_err(&journal_path))?;

        // Roll staging back to committed lengths.
        for entry in fs::read_dir(root.join("staging")).map_err(io_err(root))? {
            let path = entry.map_err(io_err(root))?.path();
            let Some(device) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".ndjson"))
                .and_then(|n| n.parse::<DeviceId>().ok())
            else {
                continue;
            };
            let committed = offsets.get(&device).copied().unwrap_or(0);
            let len = fs::metadata(&path).map_err(io_err(&path))?.len();
            if len > committed {
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(committed).map_err(io_err(&path))?;
                f.sync_all().map_err(io_err(&path))?;
            }
        }
        for (device, &committed) in &offsets {
            let path = staging_path(root, device);
            let actual = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if actual < committed {
                return Err(IngestError::MissingStaging { path, device: device.to_string(), expected: committed, actual });
            }
        }

        // Dedup set: snapshots, then the staging tail beyond them.
        let mut keys = HashSet::new();
        let mut scanned: BTreeMap<DeviceId, u64> = BTreeMap::new();
        let mut snapshot_count = 0;
        loop {
            let path = root.join("snapshots").join(format!("{:06}.json", snapshot_count + 1));
            let Ok(bytes) = fs::read(&path) else { break };
            let snap: Snapshot = match serde_json::from_slice(&bytes) {
                Ok(s) => s,
                Err(_) => break,
            };
            if snap.offsets.iter().any(|(d, o)| offsets.get(d).copied().unwrap_or(0) < *o) {
                break;
            }
            keys.extend(snap.keys);
            scanned = snap.offsets;
            snapshot_count += 1;
        }
        // Snapshots that no longer match committed staging are discarded.
        let mut stale = snapshot_count + 1;
        while fs::remove_file(root.join("snapshots").join(format!("{stale:06}.json"))).is_ok() {
            stale += 1;
        }
        let mut unsnapshotted = Vec::new();
        for (device, &committed) in &offsets {
            let from = scanned.get(device).copied().unwrap_or(0);
            if from < committed {
                scan_staging(&staging_path(root, device), from, |s| {
                    let k = s.key();
                    unsnapshotted.push(k.clone());
                    keys.insert(k);
                })?;
            }
        }

        Ok(Self {
            inner: Mutex::new(Inner {
                root: root.to_path_buf(),
                keys,
                journal,
                journal_file,
                offsets,
                files: HashMap::new(),
                unsnapshotted,
                snapshot_count,
                failpoint: None,
                max_batch: DEFAULT_MAX_BATCH,
            }),
        })
    }

    pub fn root(&self) -> PathBuf {
        self.lock().root.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_failpoint(&self, fp: Option<Failpoint>) {
        self.lock().failpoint = fp;
    }

    pub fn key_count(&self) -> usize {
        self.lock().keys.len()
    }

    pub fn contains(&self, key: &SampleKey) -> bool {
        self.lock().keys.contains(key)
    }

    pub fn journaled_ack(&self, batch_id: &str) -> Option<Ack> {
        self.lock().journal.get(batch_id).cloned()
    }

    pub fn write_meta(&self, meta: &StoreMeta) -> Result<(), IngestError> {
        let path = self.lock().root.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(meta).expect("meta serializes")).map_err(io_err(&path))
    }

    pub fn read_meta(root: &Path) -> Result<StoreMeta, IngestError> {
        let path = root.join("meta.json");
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b)
                .map_err(|e| IngestError::Corrupt { path, line: 1, reason: e.to_string() }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(StoreMeta::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Idempotent submission. Unseen keys are appended to staging and the
    /// batch is journaled before the ack is returned; a known `batch_id`
    /// gets its journaled ack back verbatim.
    pub fn submit_batch(&self, env: &BatchEnvelope) -> Result<Ack, IngestError> {
        let mut inner = self.lock();
        if !env.violations(inner.max_batch).is_empty() {
            return Ok(Ack::reject(env.batch_id.clone()));
        }
        if let Some(ack) = inner.journal.get(&env.batch_id) {
            return Ok(ack.clone());
        }
        let mut fresh = Vec::new();
        let mut batch_keys = HashSet::new();
        let mut lines = Vec::new();
        for s in &env.samples {
            let k = s.key();
            if inner.keys.contains(&k) || !batch_keys.insert(k.clone()) {
                continue;
            }
            serde_json::to_writer(&mut lines, s).expect("samples serialize");
            lines.push(b'\n');
            fresh.push(k);
        }
        let accepted = fresh.len() as u64;
        let ack = Ack {
            batch_id: env.batch_id.clone(),
            status: AckStatus::Ok,
            accepted,
            duplicates: env.samples.len() as u64 - accepted,
        };
        let device = env.origin.clone();
        let mut offset = inner.offsets.get(&device).copied().unwrap_or(0);
        if !lines.is_empty() {
            let path = staging_path(&inner.root, &device);
            if !inner.files.contains_key(&device) {
                let f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
                inner.files.insert(device.clone(), f);
            }
            let file = inner.files.get_mut(&device).expect("inserted above");
            file.write_all(&lines).map_err(io_err(&path))?;
            offset += lines.len() as u64;
        }
        if let Some(fp @ Failpoint::AfterStagingWrite) = inner.failpoint {
            return Err(IngestError::InjectedCrash(fp));
        }
        let entry = JournalEntry { ack: ack.clone(), device: device.clone(), offset };
        let mut line = serde_json::to_vec(&entry).expect("journal serializes");
        line.push(b'\n');
        let jpath = inner.root.join("journal.ndjson");
        inner.journal_file.write_all(&line).map_err(io_err(&jpath))?;

        inner.offsets.insert(device, offset);
        inner.journal.insert(ack.batch_id.clone(), ack.clone());
        inner.keys.extend(fresh.iter().cloned());
        inner.unsnapshotted.extend(fresh);
        if inner.unsnapshotted.len() >= SNAPSHOT_EVERY_KEYS {
            inner.write_snapshot()?;
        }
        Ok(ack)
    }

    /// Every accepted sample matching `filter`, in staging order (device
    /// files by name, then line order).
    pub fn read_staging(&self, filter: &StagingFilter) -> Result<Vec<SensorSample>, IngestError> {
        let (root, offsets) = {
            let inner = self.lock();
            (inner.root.clone(), inner.offsets.clone())
        };
        read_staging_dir(&root, &offsets, filter)
    }
}

impl Inner {
    fn write_snapshot(&mut self) -> Result<(), IngestError> {
        let n = self.snapshot_count + 1;
        let snap = Snapshot { offsets: self.offsets.clone(), keys: std::mem::take(&mut self.unsnapshotted) };
        let dir = self.root.join("snapshots");
        let tmp = dir.join(format!("{n:06}.json.tmp"));
        let path = dir.join(format!("{n:06}.json"));
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.snapshot_count = n;
        Ok(())
    }
}

impl IngestSink for StagingStore {
    fn submit(&self, env: &BatchEnvelope) -> Result<Ack, IngestError> {
        self.submit_batch(env)
    }
}

/// Reads the journal, calling `f` per entry; returns the byte length of the
/// valid prefix (a torn final line is dropped).
fn read_journal(path: &Path, mut f: impl FnMut(JournalEntry)) -> Result<u64, IngestError> {
    let file = match File::open(path) {
        Ok(file) => file,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let (mut valid, mut line_no) = (0u64, 0usize);
    let mut bad: Option<(usize, String)> = None;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some((line, reason)) = bad.take() {
            return Err(IngestError::Corrupt { path: path.to_path_buf(), line, reason });
        }
        let parsed = if buf.last() == Some(&b'\n') {
            serde_json::from_slice::<JournalEntry>(&buf[..n - 1]).map_err(|e| e.to_string())
        } else {
            Err("missing line terminator".into())
        };
        match parsed {
            Ok(e) => {
                f(e);
                valid += n as u64;
            }
            Err(reason) => bad = Some((line_no, reason)),
        }
    }
    Ok(valid)
}

fn scan_staging(path: &Path, from: u64, mut f: impl FnMut(SensorSample)) -> Result<(), IngestError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut line_no = 0;
    if from > 0 {
        // Count lines in the skipped prefix so errors report file lines.
        let mut prefix = vec![0u8; from as usize];
        file.read_exact(&mut prefix).map_err(io_err(path))?;
        line_no = prefix.iter().filter(|b| **b == b'\n').count();
        file.seek(SeekFrom::Start(from)).map_err(io_err(path))?;
    }
    for line in BufReader::new(file).lines() {
        line_no += 1;
        let line = line.map_err(io_err(path))?;
        let s: SensorSample = serde_json::from_str(&line)
            .map_err(|e| IngestError::Corrupt { path: path.to_path_buf(), line: line_no, reason: e.to_string() })?;
        f(s);
    }
    Ok(())
}

fn read_staging_dir(
    root: &Path,
    offsets: &BTreeMap<DeviceId, u64>,
    filter: &StagingFilter,
) -> Result<Vec<SensorSample>, IngestError> {
    let mut files: Vec<(String, PathBuf)> = offsets
        .keys()
        .filter(|d| filter.device.as_ref().is_none_or(|f| f == *d))
        .map(|d| (d.to_string(), staging_path(root, d)))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for (_, path) in files {
        scan_staging(&path, 0, |s| {
            if filter.matches(&s) {
                out.push(s);
            }
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeartRate, Payload};

    fn dev() -> DeviceId {
        "p1-watch-0".parse().unwrap()
    }

    fn batch(id: &str, seqs: std::ops::Range<u64>) -> BatchEnvelope {
        BatchEnvelope {
            batch_id: id.into(),
            origin: dev(),
            relayed_by: None,
            created_ms: 0,
            samples: seqs
                .map(|s| SensorSample { device: dev(), seq: s, t_ms: s as i64 * 1000, payload: Payload::HeartRate(HeartRate { bpm: 70.0 }) })
                .collect(),
        }
    }

    #[test]
    fn fresh_then_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        let a = store.submit_batch(&batch("b1", 0..100)).unwrap();
        assert_eq!((a.status, a.accepted, a.duplicates), (AckStatus::Ok, 100, 0));
        let again = store.submit_batch(&batch("b2", 0..100)).unwrap();
        assert_eq!((again.accepted, again.duplicates), (0, 100));
        // Same batch id: journaled ack returned unchanged.
        assert_eq!(store.submit_batch(&batch("b1", 0..100)).unwrap(), a);
    }

    #[test]
    fn malformed_is_rejected_and_not_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        let mut bad = batch("b1", 0..3);
        bad.samples[1].payload = Payload::HeartRate(HeartRate { bpm: 5.0 });
        assert_eq!(store.submit_batch(&bad).unwrap(), Ack::reject("b1"));
        assert_eq!(store.key_count(), 0);
        assert_eq!(store.journaled_ack("b1"), None);
        assert!(store.read_staging(&StagingFilter::default()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_within_one_batch_counts_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        let mut b = batch("b1", 0..3);
        b.samples.push(b.samples[2].clone());
        let ack = store.submit_batch(&b).unwrap();
        assert_eq!((ack.accepted, ack.duplicates), (3, 1));
    }

    #[test]
    fn crash_after_staging_write_rolls_back() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        store.submit_batch(&batch("b1", 0..10)).unwrap();
        let before = store.read_staging(&StagingFilter::default()).unwrap();
        store.set_failpoint(Some(Failpoint::AfterStagingWrite));
        assert!(matches!(store.submit_batch(&batch("b2", 10..20)), Err(IngestError::InjectedCrash(_))));
        drop(store);
        let store = StagingStore::open(dir.path()).unwrap();
        assert_eq!(store.read_staging(&StagingFilter::default()).unwrap(), before);
        assert_eq!(store.key_count(), 10);
        assert_eq!(store.journaled_ack("b2"), None);
        let ack = store.submit_batch(&batch("b2", 10..20)).unwrap();
        assert_eq!((ack.accepted, ack.duplicates), (10, 0));
    }

    #[test]
    fn corrupt_staging_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        store.submit_batch(&batch("b1", 0..3)).unwrap();
        let path = staging_path(dir.path(), &dev());
        let text = fs::read_to_string(&path).unwrap().replacen("heart_rate", "heart_rat", 1);
        fs::write(&path, text).unwrap();
        match store.read_staging(&StagingFilter::default()) {
            Err(IngestError::Corrupt { line, path: p, .. }) => assert_eq!((line, p), (1, path)),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn snapshots_bound_replay_and_agree() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        for i in 0..5u64 {
            store.submit_batch(&batch(&format!("b{i}"), i * 4500..(i + 1) * 4500)).unwrap();
        }
        assert_eq!(store.key_count(), 22_500);
        drop(store);
        let snaps = fs::read_dir(dir.path().join("snapshots")).unwrap().count();
        assert_eq!(snaps, 1);
        let store = StagingStore::open(dir.path()).unwrap();
        assert_eq!(store.key_count(), 22_500);
        let ack = store.submit_batch(&batch("late", 22_000..23_000)).unwrap();
        assert_eq!((ack.accepted, ack.duplicates), (500, 500));
    }

    #[test]
    fn torn_journal_tail_rolls_back_batch() {
        let dir = tempfile::tempdir().unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        store.submit_batch(&batch("b1", 0..5)).unwrap();
        store.submit_batch(&batch("b2", 5..9)).unwrap();
        drop(store);
        let jpath = dir.path().join("journal.ndjson");
        let text = fs::read_to_string(&jpath).unwrap();
        let cut = text.trim_end().rfind('\n').unwrap() + 10;
        fs::write(&jpath, &text[..cut]).unwrap();
        let store = StagingStore::open(dir.path()).unwrap();
        assert_eq!(store.key_count(), 5);
        assert_eq!(store.read_staging(&StagingFilter::default()).unwrap().len(), 5);
    }
}

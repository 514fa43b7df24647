//! Append-only durable log backing an [`EdgeBuffer`](super::EdgeBuffer).
//!
//! One JSON object per line, tagged by `rec`:
//!
//! | `rec`        | fields                                   | effect on restore                     |
//! |--------------|------------------------------------------|---------------------------------------|
//! | `open`       | `device`                                 | first line; names the owning device   |
//! | `checkpoint` | `next_seq` (modality → int), `batch_counter` | lower bounds for the counters     |
//! | `sample`     | `sample` (canonical sample object)       | row buffered                          |
//! | `quarantine` | `sample`, `reasons`                      | kept aside, consumes its seq          |
//! | `ack`        | `batch_id`, `keys`                       | tombstone: listed rows deleted        |
//! | `batch`      | `counter`                                | batch counter high-water mark         |
//! | `wear`       | `last_seen_ms` (int or null), `armed`    | wear-gap monitor state                |
//!
//! A torn final line (no newline, or unparsable) is truncated on restore.
//! An unparsable line followed by valid content is corruption and fails.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{DeviceId, Modality, SampleKey, SensorSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rec", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Open { device: DeviceId },
    Checkpoint { next_seq: BTreeMap<Modality, u64>, batch_counter: u64 },
    Sample { sample: SensorSample },
    Quarantine { sample: SensorSample, reasons: Vec<String> },
    Ack { batch_id: String, keys: Vec<SampleKey> },
    Batch { counter: u64 },
    Wear { last_seen_ms: Option<i64>, armed: bool },
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt record at {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

pub(crate) struct ReadOutcome {
    pub records: Vec<LogRecord>,
    pub discarded_bytes: u64,
}

pub(crate) struct DurableLog {
    path: PathBuf,
    file: File,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io { path: path.to_path_buf(), source }
}

impl DurableLog {
    /// Opens (creating if absent) for appending.
    pub fn open_append(path: &Path) -> Result<Self, LogError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, rec: &LogRecord) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(rec).expect("log records always serialize");
        line.push(b'\n');
        // Single write per record: a crash leaves at most one torn tail line.
        self.file.write_all(&line).map_err(io_err(&self.path))
    }

    /// Reads every record, truncating a torn tail in place.
    pub fn read_all(path: &Path) -> Result<ReadOutcome, LogError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Ok(ReadOutcome { records: Vec::new(), discarded_bytes: 0 });
            }
            Err(e) => return Err(io_err(path)(e)),
        };
        let total_len = file.metadata().map_err(io_err(path))?.len();
        let mut reader = BufReader::new(file);
        let mut records = Vec::new();
        let mut offset = 0u64;
        let mut buf = Vec::new();
        let mut line_no = 0usize;
        let mut torn_at: Option<(u64, usize, String)> = None;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if let Some((_, bad_line, reason)) = &torn_at {
                // Valid-looking data after a bad record: not a torn tail.
                return Err(LogError::Corrupt { path: path.to_path_buf(), line: *bad_line, reason: reason.clone() });
            }
            let complete = buf.last() == Some(&b'\n');
            let parsed = if complete {
                serde_json::from_slice::<LogRecord>(&buf[..n - 1]).map_err(|e| e.to_string())
            } else {
                Err("missing line terminator".to_string())
            };
            match parsed {
                Ok(rec) => records.push(rec),
                Err(reason) => torn_at = Some((offset, line_no, reason)),
            }
            offset += n as u64;
        }
        let mut discarded_bytes = 0;
        if let Some((at, _, _)) = torn_at {
            discarded_bytes = total_len - at;
            let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
            f.set_len(at).map_err(io_err(path))?;
            f.sync_all().map_err(io_err(path))?;
        }
        Ok(ReadOutcome { records, discarded_bytes })
    }

    /// Atomically replaces the log with `records` (write temp, rename).
    pub fn rewrite(&mut self, records: &[LogRecord]) -> Result<(), LogError> {
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut w = io::BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
            for rec in records {
                serde_json::to_writer(&mut w, rec).expect("log records always serialize");
                w.write_all(b"\n").map_err(io_err(&tmp))?;
            }
            w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &self.path).map_err(io_err(&self.path))?;
        *self = Self::open_append(&self.path.clone())?;
        Ok(())
    }
}

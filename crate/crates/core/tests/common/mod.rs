#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use maison_core::merger::read_csv_keys;
use maison_core::model::{Modality, SampleKey};
use maison_core::netsim::{EventTrace, TraceEvent};
use maison_core::scenario::{load_scenario, Scenario};
use maison_core::sim::{run_scenario, Mode, RunOptions, RunSummary, MERGED_DIR, TRACE_FILE};
use serde_json::Value;

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

pub fn scenario_text(name: &str) -> String {
    fs::read_to_string(scenario_path(name)).expect("bundled scenario readable")
}

pub fn bundled(name: &str, seed: Option<u64>) -> Scenario {
    load_scenario(&scenario_text(name), seed).expect("bundled scenario valid")
}

/// Bundled scenario with its JSON edited by `f`.
pub fn edited(name: &str, f: impl FnOnce(&mut Value)) -> Scenario {
    let mut v: Value = serde_json::from_str(&scenario_text(name)).unwrap();
    f(&mut v);
    load_scenario(&v.to_string(), None).expect("edited scenario valid")
}

pub fn run(sc: &Scenario, out: &Path, mode: Mode) -> RunSummary {
    run_scenario(sc, out, RunOptions { mode, port: 0 }).expect("scenario runs")
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn csv_files(out: &Path) -> BTreeMap<String, Vec<u8>> {
    tree(&out.join(MERGED_DIR)).into_iter().filter(|(k, _)| k.ends_with(".csv")).collect()
}

/// `(t_ms, key)` for every merged row of `modality`, all participants.
pub fn merged_keys(out: &Path, modality: Modality) -> Vec<(i64, SampleKey)> {
    let mut keys = Vec::new();
    for rel in csv_files(out).keys() {
        if rel.split('/').nth(1) == Some(modality.as_str()) {
            keys.extend(read_csv_keys(&out.join(MERGED_DIR).join(rel), modality).unwrap());
        }
    }
    keys
}

/// Rows of every merged CSV of `modality` as header-keyed maps.
pub fn merged_rows(out: &Path, modality: Modality) -> Vec<BTreeMap<String, String>> {
    let mut rows = Vec::new();
    for rel in csv_files(out).keys() {
        if rel.split('/').nth(1) != Some(modality.as_str()) {
            continue;
        }
        let mut r = csv::Reader::from_path(out.join(MERGED_DIR).join(rel)).unwrap();
        let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
        for rec in r.records() {
            let rec = rec.unwrap();
            rows.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
        }
    }
    rows
}

pub fn read_trace(out: &Path) -> EventTrace {
    EventTrace::parse_ndjson(&fs::read_to_string(out.join(TRACE_FILE)).unwrap()).unwrap()
}

/// Keys of every sample the simulation produced: sensor emissions plus
/// phone notifications.
pub fn emitted_keys(trace: &EventTrace) -> Vec<SampleKey> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Emit { key, .. } | TraceEvent::Notify { key, .. } => Some(key.clone()),
            _ => None,
        })
        .collect()
}

/// Scenario-local midnight of the bundled scenarios plus `hh:mm`.
pub fn local(sc: &Scenario, hh: i64, mm: i64) -> i64 {
    sc.start_ms + (hh * 60 + mm) * 60_000
}

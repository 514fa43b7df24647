use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use maison_core::merger::{merge, read_csv_keys, write_csv, write_merged, MergeError};
use maison_core::model::{
    segment_of, Accel, DeviceId, HeartRate, Location, Modality, Notification, Payload, SegmentLength, SensorSample,
    SleepSummary, Steps,
};
use proptest::prelude::*;

const T0: i64 = 1_672_635_600_000;
const OFFSET: i32 = -300;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn fixture() -> Vec<SensorSample> {
    let text = fs::read_to_string(golden_dir().join("staging.ndjson")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn files_under(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, fs::read_to_string(&p).unwrap());
            }
        }
    }
    out
}

/// Set `MAISON_BLESS=1` to regenerate `tests/golden/merged` from the fixture.
#[test]
fn ten_sample_fixture_matches_golden_csvs() {
    let files = merge(fixture(), SegmentLength::Day, OFFSET).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_merged(out.path(), &files).unwrap();
    let got = files_under(out.path());
    let expected_dir = golden_dir().join("merged");
    if std::env::var_os("MAISON_BLESS").is_some() {
        let _ = fs::remove_dir_all(&expected_dir);
        for (rel, text) in &got {
            let p = expected_dir.join(rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, text).unwrap();
        }
    }
    assert_eq!(got, files_under(&expected_dir));
}

#[test]
fn fixture_order_and_duplicates_do_not_matter() {
    let base = fixture();
    let mut shuffled: Vec<_> = base.iter().rev().cloned().collect();
    shuffled.extend(base.iter().take(4).cloned());
    assert_eq!(merge(base, SegmentLength::Day, OFFSET).unwrap(), merge(shuffled, SegmentLength::Day, OFFSET).unwrap());
}

#[test]
fn conflicting_payloads_abort_the_merge() {
    let mut samples = fixture();
    let mut twin = samples[0].clone();
    twin.t_ms += 1;
    samples.push(twin);
    assert!(matches!(merge(samples, SegmentLength::Day, OFFSET), Err(MergeError::Conflict(_))));
}

#[test]
fn rewrite_is_a_no_op_and_stale_files_go() {
    let out = tempfile::tempdir().unwrap();
    let files = merge(fixture(), SegmentLength::Hour, OFFSET).unwrap();
    let first = write_merged(out.path(), &files).unwrap();
    assert_eq!(first.rewritten, first.files);
    let again = write_merged(out.path(), &files).unwrap();
    assert_eq!((again.rewritten, again.removed), (0, 0));
    let fewer: Vec<_> = files.iter().skip(1).cloned().collect();
    let pruned = write_merged(out.path(), &fewer).unwrap();
    assert_eq!((pruned.rewritten, pruned.removed), (0, 1));
    assert!(!out.path().join(files[0].relative_path()).exists());
}

fn dev(p: u8, kind: &str) -> DeviceId {
    format!("p{p}-{kind}-0").parse().unwrap()
}

fn any_sample() -> impl Strategy<Value = SensorSample> {
    (0u8..3, 0usize..7, 0u64..40, 0i64..3 * 86_400_000, 0u32..1000).prop_map(|(p, m, seq, dt, x)| {
        let t_ms = T0 + dt;
        let (device, payload) = match Modality::ALL[m] {
            Modality::Location => (dev(p, "phone"), Payload::Location(Location { lat_deg: 43.0 + f64::from(x) / 1e4, lon_deg: -79.0 })),
            Modality::Accel => (dev(p, "watch"), Payload::Accel(Accel { ax_g: f64::from(x) / 1e3, ay_g: 0.0, az_g: 1.0 })),
            Modality::HeartRate => (dev(p, "watch"), Payload::HeartRate(HeartRate { bpm: 40.0 + f64::from(x % 150) })),
            Modality::Steps => (dev(p, "watch"), Payload::Steps(Steps { step_count: x })),
            Modality::MotionEvent => (dev(p, "motion"), Payload::MotionEvent),
            Modality::SleepSession => (
                dev(p, "sleep"),
                Payload::SleepSession(SleepSummary {
                    start_ms: t_ms - 3_600_000,
                    end_ms: t_ms,
                    total_sleep_s: 3000,
                    deep_sleep_s: x.min(3000),
                    avg_hr_bpm: 55.0,
                    snoring_s: 0,
                }),
            ),
            Modality::Notification => (dev(p, "phone"), Payload::Notification(Notification { kind: "wear_watch".into() })),
        };
        SensorSample { device, seq, t_ms, payload }
    })
}

/// Keeps the first sample per key so inputs never conflict.
fn distinct_by_key(samples: Vec<SensorSample>) -> Vec<SensorSample> {
    let mut seen = BTreeSet::new();
    samples.into_iter().filter(|s| seen.insert(s.key())).collect()
}

fn length() -> impl Strategy<Value = SegmentLength> {
    prop_oneof![Just(SegmentLength::Hour), Just(SegmentLength::Day)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_depends_only_on_the_sample_set(
        samples in prop::collection::vec(any_sample(), 0..120),
        rot in 0usize..120,
        dup in 0usize..120,
        len in length(),
    ) {
        let samples = distinct_by_key(samples);
        let mut other = samples.clone();
        if !other.is_empty() {
            let r = rot % other.len();
            other.rotate_left(r);
            other.push(samples[dup % samples.len()].clone());
        }
        let a = merge(samples.clone(), len, OFFSET).unwrap();
        let b = merge(other, len, OFFSET).unwrap();
        prop_assert_eq!(a.iter().map(write_csv).collect::<Vec<_>>(), b.iter().map(write_csv).collect::<Vec<_>>());
        let rows: usize = a.iter().map(|f| f.rows.len()).sum();
        prop_assert_eq!(rows, samples.len());
    }

    #[test]
    fn files_hold_exactly_their_segment(
        samples in prop::collection::vec(any_sample(), 1..120),
        len in length(),
        off in prop_oneof![Just(-300), Just(0), Just(330)],
    ) {
        let samples = distinct_by_key(samples);
        let out = tempfile::tempdir().unwrap();
        let files = merge(samples.clone(), len, off).unwrap();
        write_merged(out.path(), &files).unwrap();
        let mut keys = BTreeSet::new();
        for f in &files {
            let rel = f.relative_path();
            let parts: Vec<_> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
            prop_assert_eq!(&parts[0], &f.participant);
            prop_assert_eq!(parts[1].as_str(), f.segment.modality.as_str());
            for (t, key) in read_csv_keys(&out.path().join(&rel), f.segment.modality).unwrap() {
                prop_assert_eq!(segment_of(t, len, off), f.segment.start_ms);
                let (device, m, _) = key.parse().unwrap();
                prop_assert_eq!(device.participant(), f.participant.as_str());
                prop_assert_eq!(m, f.segment.modality);
                prop_assert!(keys.insert(key));
            }
            let times: Vec<i64> = f.rows.iter().map(|s| s.t_ms).collect();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        }
        prop_assert_eq!(keys, samples.iter().map(SensorSample::key).collect::<BTreeSet<_>>());
    }
}

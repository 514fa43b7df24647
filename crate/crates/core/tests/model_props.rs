use std::collections::BTreeSet;

use chrono::{Duration, FixedOffset, NaiveDate, TimeZone};
use maison_core::model::{make_sample_key, segment_of, DeviceId, DeviceKind, Modality, SegmentLength};
use proptest::prelude::*;

/// Local midnight (or top of hour) via calendar arithmetic, independent of
/// the remainder-based implementation.
fn calendar_segment(t_ms: i64, length: SegmentLength, offset_min: i32) -> i64 {
    let tz = FixedOffset::east_opt(offset_min * 60).unwrap();
    let local = tz.timestamp_millis_opt(t_ms).unwrap();
    let naive = local.naive_local();
    let floor = match length {
        SegmentLength::Day => naive.date().and_hms_opt(0, 0, 0).unwrap(),
        SegmentLength::Hour => naive.date().and_hms_opt(chrono::Timelike::hour(&naive), 0, 0).unwrap(),
    };
    tz.from_local_datetime(&floor).unwrap().timestamp_millis()
}

#[test]
fn local_0230_maps_to_local_midnight() {
    let tz = FixedOffset::west_opt(5 * 3600).unwrap();
    let t = tz.from_local_datetime(&NaiveDate::from_ymd_opt(2023, 1, 2).unwrap().and_hms_opt(2, 30, 0).unwrap()).unwrap();
    let midnight = t - Duration::minutes(150);
    assert_eq!(segment_of(t.timestamp_millis(), SegmentLength::Day, -300), midnight.timestamp_millis());
    assert_eq!(midnight.timestamp_millis(), 1_672_635_600_000);
}

#[test]
fn ten_thousand_distinct_triples_give_distinct_keys() {
    let kinds = DeviceKind::ALL;
    let mut triples = BTreeSet::new();
    let mut keys = BTreeSet::new();
    let mut i = 0u64;
    while triples.len() < 10_000 {
        let participant = format!("p{}", i % 7);
        let kind = kinds[(i / 7 % 4) as usize];
        let modality = Modality::ALL[(i / 28 % 7) as usize];
        let seq = i / 196;
        let device = DeviceId::new(&participant, kind, (i % 3) as u16).unwrap();
        if triples.insert((device.clone(), modality, seq)) {
            keys.insert(make_sample_key(&device, modality, seq));
        }
        i += 1;
    }
    assert_eq!(keys.len(), 10_000);
}

fn device() -> impl Strategy<Value = DeviceId> {
    ("[A-Za-z0-9_]{1,12}", 0usize..4, 0u16..1000)
        .prop_map(|(p, k, i)| DeviceId::new(&p, DeviceKind::ALL[k], i).unwrap())
}

fn length() -> impl Strategy<Value = SegmentLength> {
    prop_oneof![Just(SegmentLength::Hour), Just(SegmentLength::Day)]
}

proptest! {
    #[test]
    fn keys_are_injective(
        a in (device(), 0usize..7, any::<u64>()),
        b in (device(), 0usize..7, any::<u64>()),
    ) {
        let ka = make_sample_key(&a.0, Modality::ALL[a.1], a.2);
        let kb = make_sample_key(&b.0, Modality::ALL[b.1], b.2);
        prop_assert_eq!(ka == kb, a == b);
        prop_assert_eq!(ka.parse().unwrap(), (a.0, Modality::ALL[a.1], a.2));
    }

    #[test]
    fn segment_of_is_idempotent_and_partitions(
        t in -10_000_000_000_000i64..10_000_000_000_000,
        len in length(),
        off in -1439i32..1440,
    ) {
        let s = segment_of(t, len, off);
        prop_assert_eq!(segment_of(s, len, off), s);
        prop_assert!(s <= t && t < s + len.ms());
    }

    #[test]
    fn segment_of_matches_calendar(
        t in 0i64..4_000_000_000_000,
        len in length(),
        off in prop_oneof![Just(0), Just(-300), Just(330), Just(-210), Just(840), -1439i32..1440],
    ) {
        prop_assert_eq!(segment_of(t, len, off), calendar_segment(t, len, off));
    }
}

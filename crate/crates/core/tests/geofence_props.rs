use maison_core::geofence::{
    haversine_distance, step_fence, Direction, Fix, FenceTracker, GeofenceConfig, GeofenceState, Region,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R: f64 = 6_371_000.0;

/// Great-circle distance via the chord between unit vectors.
fn chord_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let v = |(lat, lon): (f64, f64)| {
        let (p, l) = (lat.to_radians(), lon.to_radians());
        [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
    };
    let (x, y) = (v(a), v(b));
    let c = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
    2.0 * R * (c / 2.0).asin()
}

/// The point `d` meters due north of `c`.
fn north_of(c: (f64, f64), d: f64) -> (f64, f64) {
    (c.0 + (d / R).to_degrees(), c.1)
}

const HOME: (f64, f64) = (43.65, -79.38);

fn cfg() -> GeofenceConfig {
    GeofenceConfig { center: HOME, radius_m: 100.0, hysteresis_m: 10.0 }
}

#[test]
fn thousandth_of_a_degree_on_the_equator() {
    let d = haversine_distance((0.0, 0.0), (0.001, 0.0)).unwrap();
    let oracle = chord_distance((0.0, 0.0), (0.001, 0.0));
    assert!((d - 111.19).abs() <= 0.1, "{d}");
    assert!((d - oracle).abs() < 1e-6, "{d} vs {oracle}");
}

#[test]
fn symmetric_and_matches_oracle_over_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    for _ in 0..1000 {
        let a = (rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
        let b = (rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
        let (ab, ba) = (haversine_distance(a, b).unwrap(), haversine_distance(b, a).unwrap());
        assert!((ab - ba).abs() <= 1e-6, "{a:?} {b:?}: {ab} vs {ba}");
        assert!((ab - chord_distance(a, b)).abs() <= 1e-3, "{a:?} {b:?}");
    }
}

fn state(region: Region) -> GeofenceState {
    GeofenceState { region, since_ms: 0, last_fix: None }
}

fn fix_at(d: f64, t_ms: i64) -> Fix {
    let (lat, lon) = north_of(HOME, d);
    Fix { lat, lon, t_ms }
}

#[test]
fn exit_needs_more_than_radius_plus_band() {
    let (s, ev) = step_fence(&state(Region::Inside), fix_at(111.0, 1), &cfg()).unwrap();
    assert_eq!(s.region, Region::Outside);
    assert_eq!(ev.unwrap().direction, Direction::Exit);
    let (s, ev) = step_fence(&state(Region::Inside), fix_at(109.9, 1), &cfg()).unwrap();
    assert_eq!((s.region, ev), (Region::Inside, None));
}

#[test]
fn enter_needs_radius_minus_band() {
    let (s, ev) = step_fence(&state(Region::Outside), fix_at(95.0, 1), &cfg()).unwrap();
    assert_eq!((s.region, ev), (Region::Outside, None));
    let (s, ev) = step_fence(&state(Region::Outside), fix_at(89.9, 1), &cfg()).unwrap();
    assert_eq!(s.region, Region::Inside);
    assert_eq!(ev.unwrap().direction, Direction::Enter);
}

proptest! {
    #[test]
    fn no_chatter_inside_the_band(first in 85.0f64..115.0, ds in prop::collection::vec(90.01f64..110.0, 1..200)) {
        let mut tr = FenceTracker::new(cfg());
        tr.observe(fix_at(first, 0)).unwrap();
        let established = tr.state().unwrap().region;
        for (i, d) in ds.into_iter().enumerate() {
            prop_assert_eq!(tr.observe(fix_at(d, i as i64 + 1)).unwrap(), None);
        }
        prop_assert_eq!(tr.state().unwrap().region, established);
    }

    #[test]
    fn transitions_alternate(ds in prop::collection::vec(0.0f64..300.0, 1..300)) {
        let mut tr = FenceTracker::new(cfg());
        let mut last: Option<Direction> = None;
        for (i, d) in ds.into_iter().enumerate() {
            if let Some(ev) = tr.observe(fix_at(d, i as i64)).unwrap() {
                prop_assert_ne!(Some(ev.direction), last);
                last = Some(ev.direction);
            }
            prop_assert_eq!(tr.should_collect(), tr.state().unwrap().region == Region::Outside);
        }
    }
}

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geo::{build_partition, GeoPoint};

fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
    let p = dir.path().join("t.csv");
    std::fs::write(&p, body).unwrap();
    p
}

fn traj(agent: &str, stays: &[(usize, u64)]) -> Trajectory {
    Trajectory {
        agent_id: agent.into(),
        city_id: "c".into(),
        stays: stays
            .iter()
            .map(|&(region_id, timestamp)| StayPoint { region_id, timestamp })
            .collect(),
    }
}

#[test]
fn header_only_file_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "agent_id,city_id,timestamp,region_id\n");
    assert!(load_trajectories(&p).unwrap().is_empty());
}

#[test]
fn rows_are_grouped_and_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        &dir,
        "agent_id,city_id,timestamp,region_id\n\
         b,c,300,2\na,c,200,1\nb,c,100,0\na,c,100,5\nb,c,200,1\na,c,300,3\n",
    );
    let t = load_trajectories(&p).unwrap();
    assert_eq!(t, vec![
        traj("a", &[(5, 100), (1, 200), (3, 300)]),
        traj("b", &[(0, 100), (1, 200), (2, 300)]),
    ]);
}

#[test]
fn duplicates_dropped_conflicts_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "agent_id,city_id,timestamp,region_id\na,c,1,1\na,c,1,1\na,c,2,0\n");
    assert_eq!(load_trajectories(&p).unwrap()[0].len(), 2);
    let p = write(&dir, "agent_id,city_id,timestamp,region_id\na,c,1,1\na,c,1,2\n");
    assert!(matches!(
        load_trajectories(&p),
        Err(TrajectoryError::TimestampInversion { timestamp: 1, .. })
    ));
}

#[test]
fn malformed_rows_report_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        &dir,
        "agent_id,city_id,timestamp,region_id\na,c,1,1\na,c,-4,1\na,c,5,x\na,c,9,2\n",
    );
    match load_trajectories(&p) {
        Err(TrajectoryError::Malformed { lines, .. }) => {
            assert_eq!(lines.iter().map(|l| l.0).collect::<Vec<_>>(), vec![3, 4]);
        }
        other => panic!("expected malformed rows, got {other:?}"),
    }
    let p = write(&dir, "agent,city_id,timestamp,region_id\n");
    assert!(load_trajectories(&p).is_err());
}

#[test]
fn unknown_regions_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "agent_id,city_id,timestamp,region_id\na,c,1,0\na,c,2,9\nb,c,1,7\n");
    let map = build_partition("c", &[GeoPoint::new(0.0, 0.0), GeoPoint::new(1.0, 0.0)]).unwrap();
    let maps = BTreeMap::from([("c".to_string(), map)]);
    match load_trajectories_checked(&p, &maps) {
        Err(TrajectoryError::UnknownRegions(v)) => {
            assert_eq!(v, vec![("a".to_string(), 9), ("b".to_string(), 7)]);
        }
        other => panic!("expected unknown regions, got {other:?}"),
    }
}

#[test]
fn fuzz_round_trip_preserves_record_multiset() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rows = Vec::new();
    let mut body = String::from("agent_id,city_id,timestamp,region_id\n");
    for _ in 0..10_000 {
        let agent = format!("agent{}", rng.random_range(0..300));
        let city = ["x", "y"][rng.random_range(0..2)];
        let ts: u64 = rng.random_range(0..10_000_000);
        // region is a function of (agent, city, ts) so no conflicting duplicates arise
        let region = ((ts * 31 + agent.len() as u64) % 97) as usize;
        rows.push((city.to_string(), agent.clone(), ts, region));
        body.push_str(&format!("{agent},{city},{ts},{region}\n"));
    }
    rows.sort();
    rows.dedup();
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, &body);
    let loaded = load_trajectories(&p).unwrap();
    assert!(loaded.iter().all(Trajectory::is_monotone));
    let out = dir.path().join("out.csv");
    save_trajectories(&out, &loaded).unwrap();
    let reloaded = load_trajectories(&out).unwrap();
    assert_eq!(reloaded, loaded);
    let mut flat: Vec<(String, String, u64, usize)> = reloaded
        .iter()
        .flat_map(|t| {
            t.stays
                .iter()
                .map(|s| (t.city_id.clone(), t.agent_id.clone(), s.timestamp, s.region_id))
        })
        .collect();
    flat.sort();
    assert_eq!(flat, rows);
}

#[test]
fn slot_examples() {
    let s = TimeSlotting::default();
    assert_eq!(s.slots_per_day(), 48);
    assert_eq!(discretize_time(0, s), 0);
    assert_eq!(discretize_time(8 * 3600 + 15 * 60, s), 16);
    assert_eq!(discretize_time(86_400 + 60, s), 0);
    assert_eq!(s.clock_label(17), "08:30");
    assert!(TimeSlotting::new(7).is_err());
    assert!(TimeSlotting::new(0).is_err());
    assert_eq!(TimeSlotting::new(15).unwrap().slots_per_day(), 96);
}

#[test]
fn slots_match_integer_division_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for minutes in [30, 15, 60] {
        let s = TimeSlotting::new(minutes).unwrap();
        for _ in 0..1_000_000 / 3 {
            let ts: u64 = rng.random_range(0..4_000_000_000);
            let within = ts - (ts / 86_400) * 86_400;
            assert_eq!(discretize_time(ts, s), (within / (u64::from(minutes) * 60)) as usize);
        }
    }
}

#[test]
fn splits_are_exact_and_seeded() {
    let trajs: Vec<Trajectory> = (0..10).map(|i| traj(&format!("a{i}"), &[(0, 1)])).collect();
    let s = split_dataset(&trajs, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    assert_eq!(s, split_dataset(&trajs, 3).unwrap());
    assert!(matches!(
        split_dataset(&trajs[..9], 3),
        Err(TrajectoryError::TooFew { .. })
    ));

    let many: Vec<Trajectory> = (0..1000).map(|i| traj(&format!("a{i}"), &[(0, 1)])).collect();
    let a = split_dataset(&many, 1).unwrap();
    let b = split_dataset(&many, 2).unwrap();
    assert_ne!(a.train, b.train);
    let mut all: Vec<String> = a
        .train
        .iter()
        .chain(&a.val)
        .chain(&a.test)
        .map(|t| t.agent_id.clone())
        .collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 1000);
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (800, 100, 100));
}

#[test]
fn poi_sequence_lookup() {
    let map = build_partition("c", &[GeoPoint::new(0.0, 0.0), GeoPoint::new(1.0, 0.0)]).unwrap();
    let mut map = map;
    map.semantics.insert(1, crate::geo::PoiDistribution::one_hot(crate::geo::PoiCategory::Healthcare));
    let t = traj("a", &[(1, 1), (0, 2), (1, 3)]);
    let seq = trajectory_to_poi_sequence(&t, &map).unwrap();
    assert_eq!(seq.len(), 3);
    assert_eq!(seq[0], seq[2]);
    assert_eq!(seq[1], *map.semantics_of(0).unwrap());
    assert!(trajectory_to_poi_sequence(&traj("a", &[(5, 1)]), &map).is_err());
}

#[test]
fn fit_length_pads_and_truncates() {
    let s = TimeSlotting::default();
    let t = traj("a", &[(3, 1800), (4, 3600 + 10)]);
    let (p, mask) = t.fit_length(4, s);
    assert_eq!(mask, vec![true, true, false, false]);
    assert_eq!(p.regions(), vec![3, 4, 4, 4]);
    assert!(p.is_monotone());
    assert_eq!(p.stays[2].timestamp, 5400);
    let (q, mask) = t.fit_length(1, s);
    assert_eq!(q.len(), 1);
    assert_eq!(mask, vec![true]);
}

proptest! {
    #[test]
    fn poi_sequence_matches_direct_lookup(regions in proptest::collection::vec(0usize..5, 1..12)) {
        let seeds: Vec<GeoPoint> = (0..5).map(|i| GeoPoint::new(i as f64, 0.0)).collect();
        let mut map = build_partition("c", &seeds).unwrap();
        for (i, c) in crate::geo::PoiCategory::ALL.iter().take(5).enumerate() {
            map.semantics.insert(i, crate::geo::PoiDistribution::one_hot(*c));
        }
        let stays: Vec<(usize, u64)> = regions.iter().enumerate().map(|(i, &r)| (r, i as u64)).collect();
        let seq = trajectory_to_poi_sequence(&traj("a", &stays), &map).unwrap();
        prop_assert_eq!(seq.len(), regions.len());
        for (d, r) in seq.iter().zip(&regions) {
            prop_assert_eq!(d, &map.semantics[r]);
        }
    }
}

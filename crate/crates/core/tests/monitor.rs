mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use racekit::geom::{ControlCommand, Pose2D, VehicleState};
use racekit::map::OccupancyGrid;
use racekit::monitor::{apply_failsafe, check, MonitorKind, MonitorSpec, Severity, Violation};
use racekit::raycast::{LaserScan, ScanConfig};
use racekit::sim::{NoiseConfig, VehicleId, VehicleParams, World};
use racekit::v2v::ConflictZone;

fn open_world(vehicles: &[(VehicleId, f64, f64, f64)]) -> World {
    let grid = OccupancyGrid::new(120, 120, 0.1, Pose2D::new(-6.0, -6.0, 0.0), 0.5).unwrap();
    let mut w = World::new(Arc::new(grid), 0);
    for &(id, x, y, v) in vehicles {
        w.add_vehicle(id, VehicleState::new(Pose2D::new(x, y, 0.0), v, 0.0), VehicleParams::default())
            .unwrap();
    }
    w
}

fn flat_scan(r: f64) -> LaserScan {
    LaserScan {
        angle_min: -2.0,
        angle_max: 2.0,
        range_max: 10.0,
        ranges: vec![r; 9],
    }
}

fn zone() -> ConflictZone {
    ConflictZone {
        center: Pose2D::new(2.0, 2.0, 0.0),
        entry_radius: 1.5,
        inner_radius: 0.5,
        capacity: 1,
    }
}

fn all_monitors(severity: Severity) -> Vec<MonitorSpec> {
    vec![
        MonitorSpec::new("clearance", MonitorKind::MinClearance { limit: 0.3 }, severity),
        MonitorSpec::new("speed", MonitorKind::MaxSpeed { limit: 4.0 }, severity),
        MonitorSpec::new("track", MonitorKind::OnTrack, severity),
        MonitorSpec::new("zone", MonitorKind::MutualExclusion { zone: zone() }, severity),
    ]
}

#[test]
fn clearance_above_limit_is_quiet() {
    let w = open_world(&[(1, 0.0, 0.0, 1.0)]);
    let scans = BTreeMap::from([(1, flat_scan(0.5))]);
    assert!(check(&all_monitors(Severity::Warn), &w, &scans).is_empty());
}

#[test]
fn clearance_below_limit_reports_the_minimum() {
    let w = open_world(&[(1, 0.0, 0.0, 1.0)]);
    let mut scan = flat_scan(0.5);
    scan.ranges[3] = 0.21;
    let v = check(&all_monitors(Severity::Warn), &w, &BTreeMap::from([(1, scan)]));
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].monitor.as_str(), v[0].vehicle, v[0].value), ("clearance", 1, 0.21));
}

#[test]
fn overspeed_reports_ground_truth_speed() {
    let w = open_world(&[(1, 0.0, 0.0, 5.0), (2, -3.0, 0.0, 3.9)]);
    let v = check(&all_monitors(Severity::Warn), &w, &BTreeMap::new());
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].monitor.as_str(), v[0].vehicle, v[0].value), ("speed", 1, 5.0));
    assert_eq!(v[0].time, w.time());
}

#[test]
fn shared_zone_names_every_occupant() {
    let w = open_world(&[(1, 2.5, 2.0, 0.0), (2, 1.2, 2.3, 0.0), (3, -4.0, -4.0, 0.0)]);
    let v = check(&all_monitors(Severity::Warn), &w, &BTreeMap::new());
    assert_eq!(v.len(), 2);
    for (viol, id) in v.iter().zip([1, 2]) {
        assert_eq!(viol.monitor, "zone");
        assert_eq!(viol.vehicle, id);
        assert_eq!(viol.involved, vec![1, 2]);
        assert_eq!(viol.value, 2.0);
    }
    let alone = open_world(&[(1, 2.5, 2.0, 0.0), (3, -4.0, -4.0, 0.0)]);
    assert!(check(&all_monitors(Severity::Warn), &alone, &BTreeMap::new()).is_empty());
}

#[test]
fn footprint_on_occupied_cells_is_off_track() {
    let mut g = OccupancyGrid::new(60, 60, 0.1, Pose2D::new(-3.0, -3.0, 0.0), 0.5).unwrap();
    g.fill_where(|x, _| x > 1.0);
    let mut w = World::new(Arc::new(g), 0);
    w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(0.9, 0.0, 0.0)), VehicleParams::default())
        .unwrap();
    w.add_vehicle(2, VehicleState::at_rest(Pose2D::new(-1.0, 0.0, 0.0)), VehicleParams::default())
        .unwrap();
    let v = check(&[MonitorSpec::new("track", MonitorKind::OnTrack, Severity::Warn)], &w, &BTreeMap::new());
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].vehicle, 1);
    assert!(v[0].value >= 1.0);
}

fn violation(vehicle: VehicleId, severity: Severity) -> Violation {
    Violation {
        monitor: "m".into(),
        vehicle,
        time: 0.0,
        value: 0.0,
        severity,
        involved: vec![vehicle],
    }
}

#[test]
fn failsafe_only_stops_its_own_vehicle() {
    let cmd = ControlCommand::new(2.0, -0.7);
    assert_eq!(apply_failsafe(1, cmd, &[]), cmd);
    assert_eq!(apply_failsafe(1, cmd, &[violation(1, Severity::Warn)]), cmd);
    assert_eq!(apply_failsafe(1, cmd, &[violation(2, Severity::Failsafe)]), cmd);
    let stopped = apply_failsafe(1, cmd, &[violation(1, Severity::Warn), violation(1, Severity::Failsafe)]);
    assert_eq!((stopped.speed, stopped.kappa), (0.0, -0.7));
}

#[test]
fn failsafe_clearance_bounds_the_closed_loop() {
    let limit = 0.6;
    let dt = 0.01;
    let p = VehicleParams::default();
    let bound = limit - p.v_max * dt * 2.0;
    let cfg = ScanConfig::default();
    // the bound presumes the car stops within 2·v_max·dt of tripping: braking
    // distance, up to two steps of travel and the march quantization must fit
    let cruise = 1.2;
    assert!(cruise * cruise / (2.0 * p.decel_max) + 2.0 * cruise * dt + cfg.march_step / 2.0 <= 2.0 * p.v_max * dt);
    for seed in 0..5u64 {
        let mut g = OccupancyGrid::new(160, 60, 0.05, Pose2D::new(-1.0, -1.5, 0.0), 0.5).unwrap();
        let wall = 4.0 + 0.3 * seed as f64;
        g.fill_where(|x, _| x > wall);
        let mut w = World::new(Arc::new(g), seed);
        w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(0.0, 0.1 * seed as f64, 0.02 * seed as f64)), p)
            .unwrap();
        let specs = [MonitorSpec::new("clearance", MonitorKind::MinClearance { limit }, Severity::Failsafe)];
        let mut rng = common::rng(seed);
        let mut closest = f64::INFINITY;
        let mut tripped = false;
        for _ in 0..600 {
            let scan = w.sense(1, &cfg, &NoiseConfig::default(), &mut rng).unwrap();
            closest = closest.min(scan.min_range());
            let v = check(&specs, &w, &BTreeMap::from([(1, scan)]));
            tripped |= !v.is_empty();
            let cmd = apply_failsafe(1, ControlCommand::new(cruise, 0.0), &v);
            assert!(w.step(&BTreeMap::from([(1, cmd)]), dt).unwrap().is_empty(), "seed {seed} crashed");
        }
        assert!(tripped, "seed {seed} never approached the wall");
        assert!(closest >= bound, "seed {seed}: {closest} < {bound}");
    }
}

fn arb_world() -> impl Strategy<Value = (Vec<(VehicleId, f64, f64, f64)>, Vec<f64>)> {
    (
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..7.0f64), 1..5),
        prop::collection::vec(0.0..2.0f64, 5),
    )
        .prop_map(|(vs, ranges)| {
            let vehicles = vs.into_iter().enumerate().map(|(i, (x, y, v))| (i as VehicleId + 1, x, y, v)).collect();
            (vehicles, ranges)
        })
}

proptest! {
    #![proptest_config(common::proptest_config(256))]

    #[test]
    fn checking_is_pure((vehicles, ranges) in arb_world(), failsafe in any::<bool>()) {
        let w = open_world(&vehicles);
        let scans: BTreeMap<VehicleId, LaserScan> = vehicles
            .iter()
            .enumerate()
            .map(|(i, &(id, ..))| (id, flat_scan(ranges[i % ranges.len()])))
            .collect();
        let sev = if failsafe { Severity::Failsafe } else { Severity::Warn };
        let specs = all_monitors(sev);
        let a = check(&specs, &w, &scans);
        let b = check(&specs, &w, &scans);
        prop_assert_eq!(&a, &b);
        for v in &a {
            prop_assert!(v.involved.contains(&v.vehicle));
            prop_assert_eq!(v.severity, sev);
        }
    }
}

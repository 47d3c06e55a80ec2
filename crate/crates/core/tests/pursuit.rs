mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use racekit::geom::{Pose2D, VehicleState};
use racekit::map::OccupancyGrid;
use racekit::path::{Waypoint, WaypointPath};
use racekit::pursuit::{find_lookahead_point, pursuit_command, PurePursuit, PursuitConfig};
use racekit::sim::{VehicleParams, World};

fn square(closed: bool) -> WaypointPath {
    let pts = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
    WaypointPath::new(pts.iter().map(|&(x, y)| Waypoint::new(x, y, 1.0)).collect(), closed).unwrap()
}

fn circle(r: f64, n: usize, speed: f64) -> WaypointPath {
    let pts = (0..n)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / n as f64;
            Waypoint::new(r * a.cos(), r * a.sin(), speed)
        })
        .collect();
    WaypointPath::new(pts, true).unwrap()
}

#[test]
fn corner_lookahead_lands_on_the_next_edge() {
    let pose = Pose2D::new(2.5, 0.1, 0.0);
    let l = 2.0;
    let got = find_lookahead_point(&square(true), &pose, l).unwrap();
    let hits = common::circle_segment((pose.x, pose.y), l, (4.0, 0.0), (4.0, 4.0));
    assert_eq!(hits.len(), 1);
    let want = (4.0, 4.0 * hits[0]);
    assert!((got.x - want.0).abs() < 1e-9 && (got.y - want.1).abs() < 1e-9, "{got:?} vs {want:?}");
    assert_eq!(got.segment, 1);
}

#[test]
fn closed_path_lookahead_wraps_to_the_start() {
    let path = square(true);
    // last edge runs (0,4) -> (0,0); the circle around (0.1, 0.6) meets the first edge
    let pose = Pose2D::new(0.1, 0.6, -PI / 2.0);
    let p = find_lookahead_point(&path, &pose, 1.0).unwrap();
    assert_eq!(p.segment, 0);
    let hits = common::circle_segment((0.1, 0.6), 1.0, (0.0, 0.0), (4.0, 0.0));
    assert!((p.x - 4.0 * hits[0]).abs() < 1e-9 && p.y.abs() < 1e-12);
}

#[test]
fn circle_tracking_settles_on_the_circle_curvature() {
    let r = 3.0;
    let path = circle(r, 240, 1.5);
    let mut tracker = PurePursuit::new(
        path,
        PursuitConfig {
            lookahead: 1.0,
            default_speed: 1.5,
            kappa_max: 3.0,
        },
    )
    .unwrap();
    let grid = Arc::new(OccupancyGrid::new(200, 200, 0.05, Pose2D::new(-5.0, -5.0, 0.0), 0.5).unwrap());
    let mut world = World::new(grid, 0);
    world
        .add_vehicle(1, VehicleState::at_rest(Pose2D::new(r, 0.0, PI / 2.0)), VehicleParams::default())
        .unwrap();
    let mut late = Vec::new();
    for step in 0..2000 {
        let pose = world.vehicle(1).unwrap().state.pose;
        let (_, cmd) = tracker.command(&pose);
        if step >= 1000 {
            late.push(cmd.kappa);
        }
        world.step(&BTreeMap::from([(1, cmd)]), 0.01).unwrap();
    }
    let mean = late.iter().sum::<f64>() / late.len() as f64;
    let worst = late.iter().map(|k| (k - 1.0 / r).abs() * r).fold(0.0, f64::max);
    assert!(worst < 0.05, "mean {mean}, worst relative error {worst}");
}

proptest! {
    #![proptest_config(common::proptest_config(512))]

    #[test]
    fn curvature_sign_follows_lateral_offset(px in -5.0..5.0f64, py in -5.0..5.0f64, th in -3.1..3.1f64,
                                             gx in -5.0..5.0f64, gy in -5.0..5.0f64) {
        let pose = Pose2D::new(px, py, th);
        prop_assume!((gx - px).hypot(gy - py) > 1e-3);
        let (_, y_local) = pose.point_to_local(gx, gy);
        prop_assume!(y_local.abs() > 1e-9);
        let cmd = pursuit_command(&pose, gx, gy, 1.0, 1e9).unwrap();
        prop_assert_eq!(cmd.kappa > 0.0, y_local > 0.0);
        let d2 = (gx - px).powi(2) + (gy - py).powi(2);
        prop_assert!((cmd.kappa - 2.0 * y_local / d2).abs() <= 1e-9 * (1.0 + cmd.kappa.abs()));
    }

    #[test]
    fn closed_lookahead_never_stalls(a in 0.0..(2.0 * PI), l in 0.3..2.0f64) {
        let path = circle(3.0, 60, 1.0);
        let pose = Pose2D::new(3.0 * a.cos(), 3.0 * a.sin(), a + PI / 2.0);
        let p = find_lookahead_point(&path, &pose, l).unwrap();
        let d = (p.x - pose.x).hypot(p.y - pose.y);
        prop_assert!((d - l).abs() < 1e-6, "distance {d}");
        // ahead of the vehicle, whatever the index
        let (fx, _) = pose.point_to_local(p.x, p.y);
        prop_assert!(fx > 0.0);
    }
}

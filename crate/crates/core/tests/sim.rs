mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use proptest::prelude::*;
use racekit::geom::{ControlCommand, Pose2D, VehicleState};
use racekit::map::OccupancyGrid;
use racekit::raycast::{simulate_scan, ScanConfig};
use racekit::sim::{odometry, step_vehicle, CollisionKind, NoiseConfig, VehicleParams, World};

fn open_grid() -> Arc<OccupancyGrid> {
    Arc::new(OccupancyGrid::new(200, 80, 0.05, Pose2D::new(-1.0, -2.0, 0.0), 0.5).unwrap())
}

fn cruise(v: f64) -> BTreeMap<u32, ControlCommand> {
    BTreeMap::from([(1, ControlCommand::new(v, 0.0)), (2, ControlCommand::new(v, 0.0))])
}

#[test]
fn single_step_error_shrinks_by_fifth_order() {
    let p = VehicleParams::default();
    let s0 = VehicleState::new(Pose2D::new(0.3, -0.2, 0.4), 2.0, 1.5);
    let cmd = ControlCommand::new(2.0, 1.5);
    let err = |dt: f64| {
        let s = step_vehicle(&s0, &p, &cmd, dt).unwrap();
        let (x, y, th) = common::arc_pose(&s0.pose, 2.0, 1.5, dt);
        (s.pose.x - x).hypot(s.pose.y - y) + common::angle_err(s.pose.theta, th)
    };
    let (e1, e2) = (err(0.1), err(0.05));
    assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
}

#[test]
fn head_on_pair_collides_at_first_overlap_step() {
    let mut w = World::new(open_grid(), 0);
    let p = VehicleParams::default();
    w.add_vehicle(1, VehicleState::new(Pose2D::new(0.0, 0.0, 0.0), 1.0, 0.0), p).unwrap();
    w.add_vehicle(2, VehicleState::new(Pose2D::new(3.005, 0.0, PI), 1.0, 0.0), p).unwrap();
    // centres close at 2 m/s; footprints touch when 0.5 m apart: after 1.2525 s
    let mut hit = None;
    for _ in 0..200 {
        let ev = w.step(&cruise(1.0), 0.01).unwrap();
        if !ev.is_empty() {
            hit = Some(ev);
            break;
        }
    }
    let ev = hit.expect("collision");
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].step, 126);
    assert_eq!(ev[0].kind, CollisionKind::Vehicle { a: 1, b: 2 });
    let frozen: Vec<_> = w.vehicles().iter().map(|v| v.state.pose).collect();
    for _ in 0..10 {
        assert!(w.step(&cruise(1.0), 0.01).unwrap().is_empty());
    }
    assert!(w.vehicles().iter().all(|v| v.collided && v.state.v == 0.0));
    assert_eq!(frozen, w.vehicles().iter().map(|v| v.state.pose).collect::<Vec<_>>());
}

#[test]
fn wall_collision_step_follows_from_distance_and_speed() {
    let mut g = OccupancyGrid::new(100, 40, 0.05, Pose2D::new(0.0, -1.0, 0.0), 0.5).unwrap();
    g.fill_where(|x, _| x > 3.0);
    let mut w = World::new(Arc::new(g), 0);
    w.add_vehicle(1, VehicleState::new(Pose2D::new(1.003, 0.0, 0.0), 1.0, 0.0), VehicleParams::default())
        .unwrap();
    let cmd = BTreeMap::from([(1, ControlCommand::new(1.0, 0.0))]);
    // the front bumper (x + 0.25) passes 3.0 once x > 2.75
    let step = (0..400)
        .find_map(|_| w.step(&cmd, 0.01).unwrap().into_iter().next())
        .expect("wall hit");
    assert_eq!(step.step, 175);
    assert_eq!(step.kind, CollisionKind::Wall { vehicle: 1 });
    assert!(w.vehicle(1).unwrap().collided);
}

#[test]
fn peer_ahead_shows_in_the_centre_beam() {
    let mut w = World::new(open_grid(), 0);
    let p = VehicleParams::default();
    w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(1.0, 0.01, 0.0)), p).unwrap();
    w.add_vehicle(2, VehicleState::at_rest(Pose2D::new(3.01, 0.01, 0.0)), p).unwrap();
    let cfg = ScanConfig::default();
    let mut rng = common::rng(0);
    let scan = w.sense(1, &cfg, &NoiseConfig::default(), &mut rng).unwrap();
    let centre = scan.ranges[cfg.beam_count / 2];
    assert!((centre - (2.01 - p.length / 2.0)).abs() <= cfg.march_step, "{centre}");

    let alone = World::new(open_grid(), 0);
    let bare = simulate_scan(alone.grid(), &Pose2D::new(3.01, 0.01, 0.0), &cfg);
    let from_peer = w.sense(2, &cfg, &NoiseConfig::default(), &mut rng).unwrap();
    // beams pointing away from vehicle 1 are unaffected by it
    assert_eq!(bare.ranges[..200], from_peer.ranges[..200]);
}

#[test]
fn noisy_scan_is_reproducible_per_seed() {
    let mut w = World::new(open_grid(), 0);
    w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(1.0, 0.0, 0.3)), VehicleParams::default()).unwrap();
    let noise = NoiseConfig {
        range_sigma: 0.01,
        ..NoiseConfig::default()
    };
    let cfg = ScanConfig::default();
    let a = w.sense(1, &cfg, &noise, &mut common::rng(5)).unwrap();
    let b = w.sense(1, &cfg, &noise, &mut common::rng(5)).unwrap();
    let c = w.sense(1, &cfg, &noise, &mut common::rng(6)).unwrap();
    assert_eq!(a.ranges.iter().map(|r| r.to_bits()).collect::<Vec<_>>(), b.ranges.iter().map(|r| r.to_bits()).collect::<Vec<_>>());
    assert_ne!(a.ranges, c.ranges);
}

#[test]
fn odometry_noise_is_unbiased() {
    let prev = VehicleState::new(Pose2D::new(1.0, 2.0, 0.7), 1.0, 0.0);
    let next = VehicleState::new(Pose2D::new(1.0 + 0.7f64.cos(), 2.0 + 0.7f64.sin(), 0.7), 1.0, 0.0);
    let noise = NoiseConfig {
        odom_pos_sigma: 0.01,
        ..NoiseConfig::default()
    };
    let mut rng = common::rng(17);
    let n = 10_000;
    let (mut mx, mut my) = (0.0, 0.0);
    for _ in 0..n {
        let d = odometry(&prev, &next, &noise, &mut rng);
        mx += d.dx;
        my += d.dy;
    }
    let bound = 3.0 * 0.01 / (n as f64).sqrt();
    assert!((mx / n as f64 - 1.0).abs() < bound);
    assert!((my / n as f64).abs() < bound);
}

fn arb_commands() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-2.0..12.0f64, -8.0..8.0f64), 1..120)
}

proptest! {
    #![proptest_config(common::proptest_config(96))]

    #[test]
    fn actuation_limits_hold(cmds in arb_commands(), v0 in 0.0..7.0f64, k0 in -3.0..3.0f64,
                             dt in 0.001..0.05f64) {
        let p = VehicleParams::default();
        let mut s = VehicleState::new(Pose2D::origin(), v0, k0);
        for (v, k) in cmds {
            let n = step_vehicle(&s, &p, &ControlCommand::new(v, k), dt).unwrap();
            prop_assert!(n.kappa.abs() <= p.kappa_max);
            prop_assert!((n.kappa - s.kappa).abs() / dt <= p.kappa_rate_max + 1e-12 * (1.0 + 1.0 / dt));
            prop_assert!(n.v >= 0.0 && n.v <= p.v_max);
            prop_assert!(n.pose.theta > -PI && n.pose.theta <= PI);
            s = n;
        }
    }

    #[test]
    fn world_replay_is_bitwise_identical(cmds in arb_commands(), seed in any::<u64>()) {
        let run = || {
            let mut w = World::new(open_grid(), seed);
            w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(2.0, 0.0, 0.0)), VehicleParams::default()).unwrap();
            w.add_vehicle(2, VehicleState::at_rest(Pose2D::new(4.0, 1.0, 1.0)), VehicleParams::default()).unwrap();
            let mut events = Vec::new();
            for &(v, k) in &cmds {
                let c = BTreeMap::from([(1, ControlCommand::new(v, k)), (2, ControlCommand::new(v, -k))]);
                events.extend(w.step(&c, 0.01).unwrap());
            }
            let bits: Vec<u64> = w.vehicles().iter()
                .flat_map(|v| [v.state.pose.x, v.state.pose.y, v.state.pose.theta, v.state.v, v.state.kappa])
                .map(f64::to_bits)
                .collect();
            (bits, events)
        };
        prop_assert_eq!(run(), run());
    }
}

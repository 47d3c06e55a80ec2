mod common;

use proptest::prelude::*;
use racekit::geom::Pose2D;
use racekit::localize::{
    init_particles, motion_update, resample_and_estimate, sensor_update, InitMode, Localizer,
    LocalizerConfig, Particle, ParticleSet,
};
use racekit::map::OccupancyGrid;
use racekit::raycast::{simulate_scan, LaserScan, ScanConfig};
use racekit::sim::OdomDelta;
use racekit::tracks::asymmetric_room;

/// 6 m corridor closed at both ends, unrotated so the exact oracle applies.
fn corridor() -> OccupancyGrid {
    let mut g = OccupancyGrid::new(140, 40, 0.05, Pose2D::new(-0.5, -1.0, 0.0), 0.5).unwrap();
    g.fill_where(|x, y| y.abs() > 0.6 || x < 0.0 || x > 6.0);
    g
}

fn scan_cfg() -> ScanConfig {
    ScanConfig {
        beam_count: 181,
        range_max: 8.0,
        ..ScanConfig::default()
    }
}

/// Gaussian log-likelihood against exact expected ranges.
fn oracle_log_likelihood(grid: &OccupancyGrid, pose: &Pose2D, scan: &LaserScan, k: usize, sigma: f64) -> f64 {
    (0..scan.ranges.len())
        .step_by(k)
        .map(|i| {
            let a = pose.theta + scan.angle_min + i as f64 * scan.angle_increment();
            let e = scan.ranges[i] - common::exact_ray(grid, pose.x, pose.y, a, scan.range_max);
            -e * e / (2.0 * sigma * sigma)
        })
        .sum()
}

#[test]
fn true_pose_outweighs_a_shifted_pose() {
    let grid = corridor();
    let truth = Pose2D::new(1.5, 0.1, 0.05);
    let scan = simulate_scan(&grid, &truth, &scan_cfg());
    let off = Pose2D::new(2.5, 0.1, 0.05);
    let (k, sigma) = (6, 0.1);
    let (lt, lo) = (
        oracle_log_likelihood(&grid, &truth, &scan, k, sigma),
        oracle_log_likelihood(&grid, &off, &scan, k, sigma),
    );
    assert!(lt > lo);

    let particles = vec![Particle { pose: truth, weight: 0.5 }, Particle { pose: off, weight: 0.5 }];
    let mut set = ParticleSet::from_particles(particles, 0).unwrap();
    sensor_update(&mut set, &scan, &grid, k, sigma, 0.025).unwrap();
    let w = set.particles();
    assert!(w[0].weight > w[1].weight);
    assert!((set.weight_sum() - 1.0).abs() < 1e-12);
}

#[test]
fn tiny_likelihoods_still_normalize() {
    let grid = corridor();
    let scan = simulate_scan(&grid, &Pose2D::new(1.0, 0.0, 0.0), &scan_cfg());
    let near = Pose2D::new(1.02, 0.0, 0.0);
    let far = Pose2D::new(5.0, -0.4, 2.0);
    let particles = vec![Particle { pose: near, weight: 0.5 }, Particle { pose: far, weight: 0.5 }];
    let mut set = ParticleSet::from_particles(particles, 0).unwrap();
    // both likelihoods are far below the smallest positive f64
    let sigma = 1e-3;
    assert!(oracle_log_likelihood(&grid, &near, &scan, 1, sigma) < -1000.0);
    sensor_update(&mut set, &scan, &grid, 1, sigma, 0.025).unwrap();
    assert!((set.weight_sum() - 1.0).abs() < 1e-12);
    assert!(set.particles()[0].weight > 0.99);
}

#[test]
fn resampling_preserves_the_expected_pose() {
    let mut rng = common::rng(21);
    use rand::Rng;
    let particles: Vec<Particle> = (0..200)
        .map(|_| Particle {
            pose: Pose2D::new(rng.random_range(0.0..4.0), rng.random_range(0.0..3.0), rng.random_range(-0.4..0.4)),
            weight: rng.random::<f64>().powi(6),
        })
        .collect();
    let reference = ParticleSet::from_particles(particles.clone(), 0).unwrap();
    assert!(reference.effective_sample_size() < 100.0, "resampling must trigger");
    let before = reference.estimate();
    let estimates: Vec<Pose2D> = (0..100)
        .map(|seed| {
            let mut set = ParticleSet::from_particles(particles.clone(), seed).unwrap();
            let e = resample_and_estimate(&mut set);
            assert!(set.particles().iter().all(|p| p.weight == 1.0 / 200.0));
            e
        })
        .collect();
    for coord in [|p: &Pose2D| p.x, |p: &Pose2D| p.y, |p: &Pose2D| p.theta] {
        let vals: Vec<f64> = estimates.iter().map(coord).collect();
        let mean = vals.iter().sum::<f64>() / 100.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let drift = (mean - coord(&before)).abs();
        assert!(drift < 3.0 * sd / 10.0 || drift < 1e-12, "drift {drift} sd {sd}");
    }
}

#[test]
fn uniform_particles_all_land_in_free_cells() {
    let grid = asymmetric_room(0.05).unwrap();
    let set = init_particles(&grid, 10_000, InitMode::UniformFree, 4).unwrap();
    assert!(set.particles().iter().all(|p| !grid.occupied_at(p.pose.x, p.pose.y)));
}

#[test]
fn localizer_tracks_a_moving_robot_from_a_gaussian_prior() {
    let grid = asymmetric_room(0.05).unwrap();
    let cfg = ScanConfig::default();
    let mut truth = Pose2D::new(1.5, 2.0, 0.0);
    let mut loc = Localizer::new(
        &grid,
        LocalizerConfig::default(),
        InitMode::Gaussian {
            pose: Pose2D::new(1.6, 1.9, 0.1),
            sigma_xy: 0.15,
            sigma_theta: 0.1,
        },
        9,
    )
    .unwrap();
    let mut est = Pose2D::origin();
    for _ in 0..20 {
        let step = Pose2D::new(0.05, 0.0, 0.0);
        truth = truth.compose(&step);
        loc.predict(&OdomDelta {
            dx: 0.05,
            dy: 0.0,
            dtheta: 0.0,
            v: 0.5,
        });
        est = loc.correct(&simulate_scan(&grid, &truth, &cfg), &grid).unwrap();
    }
    assert!(est.distance_to(&truth) < 0.1, "{est:?} vs {truth:?}");
}

proptest! {
    #![proptest_config(common::proptest_config(48))]

    #[test]
    fn weights_sum_to_one_after_every_update(seed in any::<u64>(), tx in 0.5..3.5f64, ty in 0.5..2.0f64,
                                             th in -3.1..3.1f64, k in 1usize..40, n in 1usize..60,
                                             sigma in 0.02..0.5f64) {
        let grid = asymmetric_room(0.05).unwrap();
        let truth = Pose2D::new(tx, ty, th);
        prop_assume!(!grid.occupied_at(tx, ty));
        let scan = simulate_scan(&grid, &truth, &scan_cfg());
        let mut set = init_particles(&grid, n, InitMode::UniformFree, seed).unwrap();
        for _ in 0..3 {
            let _ = sensor_update(&mut set, &scan, &grid, k, sigma, 0.025);
            prop_assert!((set.weight_sum() - 1.0).abs() < 1e-9);
            prop_assert!(set.particles().iter().all(|p| p.weight >= 0.0));
            resample_and_estimate(&mut set);
            prop_assert_eq!(set.len(), n);
            motion_update(&mut set, &OdomDelta { dx: 0.02, dy: 0.0, dtheta: 0.01, v: 0.2 }, 0.01, 0.01);
        }
    }
}

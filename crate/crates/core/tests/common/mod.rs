//! Independent reference implementations used as test oracles. None of
//! these call into the code they check.

#![allow(dead_code)]

use racekit::geom::Pose2D;
use racekit::map::OccupancyGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entry distance of the ray `o + t·d` into the box, if it hits it at t ≥ 0.
fn slab_entry(o: (f64, f64), d: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> Option<f64> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for (oa, da, la, ha) in [(o.0, d.0, lo.0, hi.0), (o.1, d.1, lo.1, hi.1)] {
        if da.abs() < 1e-15 {
            if oa < la || oa > ha {
                return None;
            }
        } else {
            let (a, b) = ((la - oa) / da, (ha - oa) / da);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 <= t1).then_some(t0)
}

/// Exact distance from `(x, y)` along `angle` to the first occupied cell or
/// to the grid edge, by testing every occupied cell's box. The grid origin
/// must be unrotated.
pub fn exact_ray(grid: &OccupancyGrid, x: f64, y: f64, angle: f64, range_max: f64) -> f64 {
    assert_eq!(grid.origin().theta, 0.0, "oracle assumes an axis-aligned grid");
    let res = grid.resolution();
    let ox = grid.origin().x;
    let oy = grid.origin().y;
    let (w, h) = (grid.width() as f64 * res, grid.height() as f64 * res);
    let (gx, gy) = (x - ox, y - oy);
    let c0 = (gx / res).floor() as i64;
    let r0 = (gy / res).floor() as i64;
    if grid.is_occupied(c0, r0) {
        return 0.0;
    }
    let d = (angle.cos(), angle.sin());
    // leaving the map: the exit parameter of the map box
    let mut best = f64::INFINITY;
    for (o, da, hi) in [(gx, d.0, w), (gy, d.1, h)] {
        if da > 0.0 {
            best = best.min((hi - o) / da);
        } else if da < 0.0 {
            best = best.min(-o / da);
        }
    }
    for row in 0..grid.height() {
        for col in 0..grid.width() {
            if !grid.is_occupied(col as i64, row as i64) {
                continue;
            }
            let lo = (col as f64 * res, row as f64 * res);
            let hi = (lo.0 + res, lo.1 + res);
            if let Some(t) = slab_entry((gx, gy), d, lo, hi) {
                best = best.min(t);
            }
        }
    }
    best.min(range_max)
}

/// Axis-aligned grid with random rectangular blocks.
pub fn random_block_grid(rng: &mut impl Rng, width: usize, height: usize, res: f64, blocks: usize) -> OccupancyGrid {
    let mut g = OccupancyGrid::new(width, height, res, Pose2D::new(-0.3, 0.2, 0.0), 0.5).unwrap();
    for _ in 0..blocks {
        let c = rng.random_range(0..width);
        let r = rng.random_range(0..height);
        let bw = rng.random_range(1..=6);
        let bh = rng.random_range(1..=6);
        for row in r..(r + bh).min(height) {
            for col in c..(c + bw).min(width) {
                g.set(col, row, 1.0);
            }
        }
    }
    g
}

/// All maximal runs `ranges[i..=j] > thr`, found by checking every (i, j).
pub fn brute_gaps(ranges: &[f64], thr: f64) -> Vec<(usize, usize)> {
    let n = ranges.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let open = ranges[i..=j].iter().all(|&r| r > thr);
            let left = i == 0 || ranges[i - 1] <= thr;
            let right = j + 1 == n || ranges[j + 1] <= thr;
            if open && left && right {
                out.push((i, j));
            }
        }
    }
    out
}

/// Lagrange interpolation through `(xs[i], ys[i])` evaluated at `t`.
pub fn lagrange(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..xs.len() {
        let mut l = 1.0;
        for j in 0..xs.len() {
            if i != j {
                l *= (t - xs[j]) / (xs[i] - xs[j]);
            }
        }
        sum += ys[i] * l;
    }
    sum
}

/// κ(s') of the curvature spline, from its four equispaced knots.
pub fn spline_kappa(s: f64, knots: [f64; 4], t: f64) -> f64 {
    lagrange(&[0.0, s / 3.0, 2.0 * s / 3.0, s], &knots, t)
}

/// Heading after arc length `t`: ∫κ by three-point Gauss–Legendre, exact
/// for the cubic κ.
fn spline_heading(theta0: f64, s: f64, knots: [f64; 4], t: f64) -> f64 {
    let nodes = [(-(0.6f64).sqrt(), 5.0 / 9.0), (0.0, 8.0 / 9.0), ((0.6f64).sqrt(), 5.0 / 9.0)];
    let half = 0.5 * t;
    theta0
        + half
            * nodes
                .iter()
                .map(|&(xi, w)| w * spline_kappa(s, knots, half * (xi + 1.0)))
                .sum::<f64>()
}

/// Endpoint of the spline from `start` by composite Simpson on the exact
/// heading, independent of any stepping scheme.
pub fn spline_endpoint(start: &Pose2D, s: f64, knots: [f64; 4], intervals: usize) -> (f64, f64, f64) {
    let n = intervals + intervals % 2;
    let h = s / n as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..=n {
        let psi = spline_heading(start.theta, s, knots, i as f64 * h);
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sx += w * psi.cos();
        sy += w * psi.sin();
    }
    (
        start.x + sx * h / 3.0,
        start.y + sy * h / 3.0,
        spline_heading(start.theta, s, knots, s),
    )
}

/// Closed-form constant-speed, constant-curvature motion for time `t`.
pub fn arc_pose(start: &Pose2D, v: f64, kappa: f64, t: f64) -> (f64, f64, f64) {
    let th = start.theta;
    if kappa.abs() < 1e-12 {
        return (start.x + v * t * th.cos(), start.y + v * t * th.sin(), th);
    }
    let th1 = th + v * kappa * t;
    (
        start.x + (th1.sin() - th.sin()) / kappa,
        start.y - (th1.cos() - th.cos()) / kappa,
        th1,
    )
}

/// Intersections of the circle (c, r) with segment a→b, as segment parameters.
pub fn circle_segment(c: (f64, f64), r: f64, a: (f64, f64), b: (f64, f64)) -> Vec<f64> {
    let d = (b.0 - a.0, b.1 - a.1);
    let f = (a.0 - c.0, a.1 - c.1);
    let qa = d.0 * d.0 + d.1 * d.1;
    let qb = 2.0 * (f.0 * d.0 + f.1 * d.1);
    let qc = f.0 * f.0 + f.1 * f.1 - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)]
        .into_iter()
        .filter(|t| (0.0..=1.0).contains(t))
        .collect()
}

pub fn angle_err(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Property-test settings with a pinned seed so every run checks the same
/// cases. Set `RACEKIT_PROPTEST_SEED` to explore other cases.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    let seed = std::env::var("RACEKIT_PROPTEST_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0x5eed_2d2d);
    proptest::test_runner::Config {
        cases,
        rng_seed: proptest::test_runner::RngSeed::Fixed(seed),
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}

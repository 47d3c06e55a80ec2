//! Procedural maps and reference paths for the bundled scenarios.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::geom::Pose2D;
use crate::map::{MapError, OccupancyGrid};
use crate::path::{Waypoint, WaypointPath};
use crate::v2v::ConflictZone;

const OCC_THRESHOLD: f64 = 0.65;

/// Directed segment; a lap counts when a vehicle crosses from its right
/// side to its left side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LapLine {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl LapLine {
    /// Positive on the left of a→b.
    pub fn side(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        dx * (y - self.a[1]) - dy * (x - self.a[0])
    }

    /// +1 for a right-to-left crossing of the segment between two
    /// positions, −1 for the reverse, 0 otherwise.
    pub fn crossing(&self, from: (f64, f64), to: (f64, f64)) -> i32 {
        let s0 = self.side(from.0, from.1);
        let s1 = self.side(to.0, to.1);
        let dir = match (s0 < 0.0, s1 < 0.0) {
            (true, false) => 1,
            (false, true) => -1,
            _ => return 0,
        };
        // where along a→b the motion crosses
        let t = s0 / (s0 - s1);
        let px = from.0 + t * (to.0 - from.0);
        let py = from.1 + t * (to.1 - from.1);
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let u = ((px - self.a[0]) * dx + (py - self.a[1]) * dy) / (dx * dx + dy * dy);
        if (0.0..=1.0).contains(&u) {
            dir
        } else {
            0
        }
    }
}

/// A closed circuit: map, centerline, start pose and lap line.
#[derive(Debug, Clone)]
pub struct Track {
    pub grid: OccupancyGrid,
    pub centerline: WaypointPath,
    pub start: Pose2D,
    pub lap_line: LapLine,
}

fn grid_covering(x0: f64, y0: f64, x1: f64, y1: f64, resolution: f64) -> Result<OccupancyGrid, MapError> {
    let w = ((x1 - x0) / resolution).ceil() as usize;
    let h = ((y1 - y0) / resolution).ceil() as usize;
    OccupancyGrid::new(w, h, resolution, Pose2D::new(x0, y0, 0.0), OCC_THRESHOLD)
}

/// Distance from a point to the stadium centreline with straights of
/// length `straight` along x and end radius `radius`.
fn stadium_distance(x: f64, y: f64, straight: f64, radius: f64) -> f64 {
    let h = straight / 2.0;
    if x.abs() <= h {
        (y.abs() - radius).abs()
    } else {
        ((x.abs() - h).hypot(y) - radius).abs()
    }
}

fn stadium_centerline(straight: f64, radius: f64, spacing: f64, speed: f64) -> Vec<Waypoint> {
    let h = straight / 2.0;
    let mut pts = Vec::new();
    let n_straight = (straight / spacing).ceil().max(1.0) as usize;
    let n_arc = (PI * radius / spacing).ceil().max(8.0) as usize;
    let mut push = |x: f64, y: f64| pts.push(Waypoint::new(x, y, speed));
    // bottom straight, heading +x
    if straight > 0.0 {
        for i in 0..n_straight {
            push(-h + straight * i as f64 / n_straight as f64, -radius);
        }
    }
    for i in 0..n_arc {
        let a = -PI / 2.0 + PI * i as f64 / n_arc as f64;
        push(h + radius * a.cos(), radius * a.sin());
    }
    if straight > 0.0 {
        for i in 0..n_straight {
            push(h - straight * i as f64 / n_straight as f64, radius);
        }
    }
    for i in 0..n_arc {
        let a = PI / 2.0 + PI * i as f64 / n_arc as f64;
        push(-h + radius * a.cos(), radius * a.sin());
    }
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvalSpec {
    pub straight: f64,
    pub radius: f64,
    pub width: f64,
    pub resolution: f64,
    pub speed: f64,
}

impl Default for OvalSpec {
    fn default() -> Self {
        Self {
            straight: 6.0,
            radius: 3.0,
            width: 1.6,
            resolution: 0.05,
            speed: 2.0,
        }
    }
}

/// Counter-clockwise stadium circuit; a zero straight gives a ring.
pub fn oval(spec: &OvalSpec) -> Result<Track, MapError> {
    let reach = spec.radius + spec.width / 2.0 + 0.5;
    let h = spec.straight / 2.0;
    let mut grid = grid_covering(-h - reach, -reach, h + reach, reach, spec.resolution)?;
    let half = spec.width / 2.0;
    grid.fill_where(|x, y| stadium_distance(x, y, spec.straight, spec.radius) > half);
    let centerline = WaypointPath::new(stadium_centerline(spec.straight, spec.radius, 0.1, spec.speed), true)
        .map_err(|e| MapError::InvalidGrid(e.to_string()))?;
    // start just past the line so the first crossing closes lap one
    let start = if spec.straight > 0.0 {
        Pose2D::new(-h + 0.5, -spec.radius, 0.0)
    } else {
        let a = -PI / 2.0 + 0.5 / spec.radius;
        Pose2D::new(spec.radius * a.cos(), spec.radius * a.sin(), a + PI / 2.0)
    };
    let lap_line = LapLine {
        a: [-h, -spec.radius + spec.width],
        b: [-h, -spec.radius - spec.width],
    };
    Ok(Track {
        grid,
        centerline,
        start,
        lap_line,
    })
}

/// Oval with boxes alternating across the straights.
pub fn obstacle_oval(spec: &OvalSpec) -> Result<Track, MapError> {
    let mut t = oval(spec)?;
    let h = spec.straight / 2.0;
    let r = spec.radius;
    let q = spec.width / 4.0;
    // (centre x, centre y, half-size)
    let boxes = [
        (-h * 0.2, -r + q, 0.15),
        (h * 0.6, -r - q, 0.15),
        (h * 0.3, r + q, 0.15),
        (-h * 0.5, r - q, 0.15),
    ];
    t.grid
        .fill_where(|x, y| boxes.iter().any(|(bx, by, s)| (x - bx).abs() <= *s && (y - by).abs() <= *s));
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundaboutSpec {
    pub arms: usize,
    pub island_radius: f64,
    pub lane_radius: f64,
    pub entry_radius: f64,
    pub arm_length: f64,
    pub resolution: f64,
    pub speed: f64,
}

impl Default for RoundaboutSpec {
    fn default() -> Self {
        Self {
            arms: 3,
            island_radius: 1.0,
            lane_radius: 1.8,
            entry_radius: 2.6,
            arm_length: 7.5,
            resolution: 0.05,
            speed: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundaboutTrack {
    pub grid: OccupancyGrid,
    pub zone: ConflictZone,
    /// One open route per arm: in along the arm, half a turn
    /// counter-clockwise, out along the opposite direction.
    pub routes: Vec<WaypointPath>,
}

impl RoundaboutTrack {
    /// Pose on arm `i`'s approach, `radius` from the centre, facing in.
    pub fn approach_pose(&self, spec: &RoundaboutSpec, arm: usize, radius: f64) -> Pose2D {
        let phi = arm_angle(spec, arm);
        Pose2D::new(radius * phi.cos(), radius * phi.sin(), phi + PI)
    }
}

fn arm_angle(spec: &RoundaboutSpec, arm: usize) -> f64 {
    TAU * arm as f64 / spec.arms as f64
}

/// Open ground with a central island that blocks line of sight.
pub fn roundabout(spec: &RoundaboutSpec) -> Result<RoundaboutTrack, MapError> {
    let reach = spec.arm_length + 1.0;
    let mut grid = grid_covering(-reach, -reach, reach, reach, spec.resolution)?;
    grid.fill_where(|x, y| x.hypot(y) <= spec.island_radius);
    let turn_in = spec.entry_radius + 0.1;
    let delta = 0.35;
    let mut routes = Vec::new();
    for arm in 0..spec.arms {
        let phi = arm_angle(spec, arm);
        let mut pts = Vec::new();
        let mut r = spec.arm_length;
        while r > turn_in {
            pts.push(Waypoint::new(r * phi.cos(), r * phi.sin(), spec.speed));
            r -= 0.1;
        }
        let (a0, a1) = (phi + delta, phi + PI - delta);
        let n = ((a1 - a0) * spec.lane_radius / 0.1).ceil() as usize;
        for i in 0..=n {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            pts.push(Waypoint::new(spec.lane_radius * a.cos(), spec.lane_radius * a.sin(), spec.speed));
        }
        let out = phi + PI;
        let mut r = turn_in;
        while r <= spec.arm_length {
            pts.push(Waypoint::new(r * out.cos(), r * out.sin(), spec.speed));
            r += 0.1;
        }
        routes.push(WaypointPath::new(pts, false).map_err(|e| MapError::InvalidGrid(e.to_string()))?);
    }
    Ok(RoundaboutTrack {
        grid,
        zone: ConflictZone {
            center: Pose2D::origin(),
            entry_radius: spec.entry_radius,
            inner_radius: spec.island_radius,
            capacity: 1,
        },
        routes,
    })
}

/// Walled room with obstacles placed so that no rotation or reflection of
/// the room maps it onto itself.
pub fn asymmetric_room(resolution: f64) -> Result<OccupancyGrid, MapError> {
    let (w, h) = (6.0, 4.0);
    let mut grid = grid_covering(-0.2, -0.2, w + 0.2, h + 0.2, resolution)?;
    let rects: [(f64, f64, f64, f64); 4] = [
        (0.8, 0.7, 2.0, 1.3),
        (0.0, 2.9, 0.7, 4.0),
        (4.4, 2.2, 4.8, 3.4),
        (3.2, 0.0, 3.5, 0.8),
    ];
    grid.fill_where(|x, y| {
        let wall = x < 0.0 || y < 0.0 || x > w || y > h || x + y > 8.0;
        wall || rects.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x <= x1 && y >= y0 && y <= y1)
    });
    Ok(grid)
}

//! Pure-pursuit path tracking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{ControlCommand, Pose2D};
use crate::path::{Projection, WaypointPath};

#[derive(Debug, Error, PartialEq)]
pub enum PursuitError {
    #[error("path has zero length")]
    EmptyPath,
    #[error("goal point coincides with the vehicle")]
    DegenerateGoal,
    #[error("lookahead must be positive, got {0}")]
    BadLookahead(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PursuitConfig {
    pub lookahead: f64,
    /// Speed for waypoint rows that carry none.
    pub default_speed: f64,
    pub kappa_max: f64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            lookahead: 1.0,
            default_speed: 2.0,
            kappa_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadPoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub segment: usize,
}

/// Segment parameters where the circle `(cx, cy, r)` crosses segment `i`.
fn circle_roots(path: &WaypointPath, i: usize, cx: f64, cy: f64, r: f64) -> Option<(f64, f64)> {
    let (a, b) = path.segment(i);
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (fx, fy) = (a.x - cx, a.y - cy);
    let qa = dx * dx + dy * dy;
    if qa == 0.0 {
        return None;
    }
    let qb = 2.0 * (fx * dx + fy * dy);
    let qc = fx * fx + fy * fy - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)))
}

fn point_on(path: &WaypointPath, i: usize, t: f64) -> LookaheadPoint {
    let (a, b) = path.segment(i);
    LookaheadPoint {
        x: a.x + t * (b.x - a.x),
        y: a.y + t * (b.y - a.y),
        speed: a.speed + t * (b.speed - a.speed),
        segment: i,
    }
}

/// First crossing of the lookahead circle with the path, searching forward
/// from the closest point `proj`; falls back to `proj` itself.
pub fn lookahead_from(path: &WaypointPath, pose: &Pose2D, lookahead: f64, proj: &Projection) -> LookaheadPoint {
    let n = path.segment_count();
    for k in 0..n {
        let i = proj.segment + k;
        if !path.is_closed() && i >= n {
            break;
        }
        let i = i % n;
        let Some((t1, t2)) = circle_roots(path, i, pose.x, pose.y, lookahead) else {
            continue;
        };
        if k == 0 {
            // on the closest segment only the crossing ahead of the projection counts
            if t2 >= proj.t && t2 <= 1.0 {
                return point_on(path, i, t2);
            }
        } else if (0.0..=1.0).contains(&t1) {
            return point_on(path, i, t1);
        } else if (0.0..=1.0).contains(&t2) {
            return point_on(path, i, t2);
        }
    }
    point_on(path, proj.segment, proj.t)
}

pub fn find_lookahead_point(path: &WaypointPath, pose: &Pose2D, lookahead: f64) -> Result<LookaheadPoint, PursuitError> {
    if !(lookahead > 0.0) {
        return Err(PursuitError::BadLookahead(lookahead));
    }
    if path.length() == 0.0 {
        return Err(PursuitError::EmptyPath);
    }
    let proj = path.project(pose.x, pose.y);
    Ok(lookahead_from(path, pose, lookahead, &proj))
}

/// Curvature of the arc from `pose` through the goal point: 2·y / d².
pub fn pursuit_command(pose: &Pose2D, x: f64, y: f64, speed: f64, kappa_max: f64) -> Result<ControlCommand, PursuitError> {
    let (_, ly) = pose.point_to_local(x, y);
    let d2 = (x - pose.x).powi(2) + (y - pose.y).powi(2);
    if d2.sqrt() < 1e-6 {
        return Err(PursuitError::DegenerateGoal);
    }
    Ok(ControlCommand {
        speed,
        kappa: (2.0 * ly / d2).clamp(-kappa_max, kappa_max),
    })
}

/// Per-vehicle tracker that warm-starts the closest-segment search.
#[derive(Debug, Clone)]
pub struct PurePursuit {
    pub path: WaypointPath,
    pub config: PursuitConfig,
    cursor: Option<usize>,
    last: Option<Projection>,
}

impl PurePursuit {
    pub fn new(path: WaypointPath, config: PursuitConfig) -> Result<Self, PursuitError> {
        if !(config.lookahead > 0.0) {
            return Err(PursuitError::BadLookahead(config.lookahead));
        }
        if path.length() == 0.0 {
            return Err(PursuitError::EmptyPath);
        }
        Ok(Self {
            path,
            config,
            cursor: None,
            last: None,
        })
    }

    pub fn cursor(&self) -> Option<usize> {
        self.cursor
    }

    /// Closest-point projection from the most recent update.
    pub fn last_projection(&self) -> Option<&Projection> {
        self.last.as_ref()
    }

    fn window(&self, start: usize) -> usize {
        let horizon = (4.0 * self.config.lookahead).max(2.0);
        let n = self.path.segment_count();
        let mut acc = 0.0;
        let mut count = 0;
        while count < n && (acc < horizon || count < 3) {
            let (a, b) = self.path.segment((start + count) % n);
            acc += (b.x - a.x).hypot(b.y - a.y);
            count += 1;
        }
        count
    }

    pub fn lookahead_point(&mut self, pose: &Pose2D) -> LookaheadPoint {
        let proj = match self.cursor {
            None => self.path.project(pose.x, pose.y),
            Some(c) => self.path.project_range(pose.x, pose.y, c, self.window(c)),
        };
        self.cursor = Some(proj.segment);
        let p = lookahead_from(&self.path, pose, self.config.lookahead, &proj);
        self.last = Some(proj);
        p
    }

    /// Command toward the lookahead point; stops if it collapses onto the pose.
    pub fn command(&mut self, pose: &Pose2D) -> (LookaheadPoint, ControlCommand) {
        let p = self.lookahead_point(pose);
        let cmd = pursuit_command(pose, p.x, p.y, p.speed, self.config.kappa_max).unwrap_or(ControlCommand::stop());
        (p, cmd)
    }
}

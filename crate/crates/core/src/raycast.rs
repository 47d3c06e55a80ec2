//! Fixed-step ray marching over occupancy grids.
//!
//! Rays advance in steps of `march_step` (at most half a cell). Between two
//! samples a ray can cross at most one extra cell, through a corner; that
//! cell is checked explicitly so thin corner clips are not skipped. The hit
//! interval is then halved once, which bounds the error by `march_step / 4`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose2D;
use crate::map::OccupancyGrid;

/// Read access to cell occupancy on top of a grid's geometry.
pub trait CellMap: Sync {
    fn grid(&self) -> &OccupancyGrid;
    fn occupied(&self, col: i64, row: i64) -> bool;
}

impl CellMap for OccupancyGrid {
    fn grid(&self) -> &OccupancyGrid {
        self
    }

    #[inline]
    fn occupied(&self, col: i64, row: i64) -> bool {
        self.is_occupied(col, row)
    }
}

/// A grid plus extra occupied cells, e.g. rasterized vehicles.
#[derive(Debug, Clone)]
pub struct Overlay<'a> {
    base: &'a OccupancyGrid,
    extra: Vec<bool>,
}

impl<'a> Overlay<'a> {
    pub fn new(base: &'a OccupancyGrid) -> Self {
        Self {
            base,
            extra: vec![false; base.width() * base.height()],
        }
    }

    pub fn mark(&mut self, col: usize, row: usize) {
        let w = self.base.width();
        self.extra[row * w + col] = true;
    }
}

impl CellMap for Overlay<'_> {
    fn grid(&self) -> &OccupancyGrid {
        self.base
    }

    #[inline]
    fn occupied(&self, col: i64, row: i64) -> bool {
        if self.base.is_occupied(col, row) {
            return true;
        }
        // is_occupied already handled out-of-range
        self.extra[row as usize * self.base.width() + col as usize]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScanConfigError {
    #[error("beam_count must be at least 2, got {0}")]
    TooFewBeams(usize),
    #[error("angle_min {0} must be below angle_max {1}")]
    BadSpan(f64, f64),
    #[error("range_max must be positive, got {0}")]
    BadRange(f64),
    #[error("march_step {step} must be positive and at most half the resolution {resolution}")]
    BadStep { step: f64, resolution: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub angle_min: f64,
    pub angle_max: f64,
    pub beam_count: usize,
    pub range_max: f64,
    pub march_step: f64,
}

impl Default for ScanConfig {
    /// 270° / 1081 beams / 10 m, the geometry of a common 1/10-scale lidar.
    fn default() -> Self {
        Self {
            angle_min: -135f64.to_radians(),
            angle_max: 135f64.to_radians(),
            beam_count: 1081,
            range_max: 10.0,
            march_step: 0.025,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self, resolution: f64) -> Result<(), ScanConfigError> {
        if self.beam_count < 2 {
            return Err(ScanConfigError::TooFewBeams(self.beam_count));
        }
        if !(self.angle_min < self.angle_max) {
            return Err(ScanConfigError::BadSpan(self.angle_min, self.angle_max));
        }
        if !(self.range_max > 0.0) {
            return Err(ScanConfigError::BadRange(self.range_max));
        }
        if !(self.march_step > 0.0 && self.march_step <= 0.5 * resolution + 1e-15) {
            return Err(ScanConfigError::BadStep {
                step: self.march_step,
                resolution,
            });
        }
        Ok(())
    }

    pub fn angle_increment(&self) -> f64 {
        (self.angle_max - self.angle_min) / (self.beam_count - 1) as f64
    }

    /// Angle of beam `i` relative to the sensor heading.
    pub fn beam_angle(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub angle_min: f64,
    pub angle_max: f64,
    pub range_max: f64,
    pub ranges: Vec<f64>,
}

impl LaserScan {
    pub fn beam_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn angle_increment(&self) -> f64 {
        (self.angle_max - self.angle_min) / (self.ranges.len().max(2) - 1) as f64
    }

    pub fn beam_angle(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment()
    }

    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// March state in cell units.
struct Ray<'m, M: CellMap + ?Sized> {
    map: &'m M,
    gx: f64,
    gy: f64,
    dx: f64,
    dy: f64,
}

impl<M: CellMap + ?Sized> Ray<'_, M> {
    #[inline]
    fn cell_at(&self, t: f64) -> (i64, i64) {
        ((self.gx + t * self.dx).floor() as i64, (self.gy + t * self.dy).floor() as i64)
    }

    /// Whether the ray meets an occupied cell after leaving `from` (free,
    /// reached at `t0`) and up to the sample cell `to`. Steps are at most
    /// half a cell, so at most one corner cell lies in between.
    #[inline]
    fn blocked_between(&self, from: (i64, i64), to: (i64, i64)) -> bool {
        if from == to {
            return false;
        }
        if self.map.occupied(to.0, to.1) {
            return true;
        }
        if from.0 != to.0 && from.1 != to.1 {
            let bx = if to.0 > from.0 { from.0 + 1 } else { from.0 } as f64;
            let by = if to.1 > from.1 { from.1 + 1 } else { from.1 } as f64;
            let tx = (bx - self.gx) / self.dx;
            let ty = (by - self.gy) / self.dy;
            let corner = if tx < ty {
                Some((to.0, from.1))
            } else if ty < tx {
                Some((from.0, to.1))
            } else {
                None
            };
            if let Some((c, r)) = corner {
                return self.map.occupied(c, r);
            }
        }
        false
    }
}

/// Distance along `angle` (world frame) from `origin` to the first occupied
/// cell, or `range_max` if none. Off-grid space counts as occupied.
pub fn cast_ray<M: CellMap + ?Sized>(
    map: &M,
    origin: &Pose2D,
    angle: f64,
    range_max: f64,
    march_step: f64,
) -> f64 {
    let grid = map.grid();
    let res = grid.resolution();
    let (gx, gy) = grid.world_to_grid_f(origin.x, origin.y);
    let local = angle - grid.origin().theta;
    let ray = Ray {
        map,
        gx,
        gy,
        dx: local.cos(),
        dy: local.sin(),
    };
    let start = ray.cell_at(0.0);
    if map.occupied(start.0, start.1) {
        return 0.0;
    }
    if !(range_max > 0.0) {
        return 0.0;
    }
    let step = march_step.min(0.5 * res) / res;
    let limit = range_max / res;
    let mut prev_t = 0.0;
    let mut prev_cell = start;
    let mut k = 1u64;
    loop {
        let t = (k as f64 * step).min(limit);
        let cell = ray.cell_at(t);
        if ray.blocked_between(prev_cell, cell) {
            let mid = 0.5 * (prev_t + t);
            let hit = if ray.blocked_between(prev_cell, ray.cell_at(mid)) {
                0.5 * (prev_t + mid)
            } else {
                0.5 * (mid + t)
            };
            return (hit * res).min(range_max);
        }
        if t >= limit {
            return range_max;
        }
        prev_t = t;
        prev_cell = cell;
        k += 1;
    }
}

/// One range per beam; beam `i` points at `pose.theta + cfg.beam_angle(i)`.
pub fn simulate_scan<M: CellMap + ?Sized>(map: &M, pose: &Pose2D, cfg: &ScanConfig) -> LaserScan {
    let ranges = (0..cfg.beam_count)
        .map(|i| cast_ray(map, pose, pose.theta + cfg.beam_angle(i), cfg.range_max, cfg.march_step))
        .collect();
    LaserScan {
        angle_min: cfg.angle_min,
        angle_max: cfg.angle_max,
        range_max: cfg.range_max,
        ranges,
    }
}

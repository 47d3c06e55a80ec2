//! Waypoint polylines and the `x,y,speed` CSV format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("a path needs at least two waypoints, got {0}")]
    TooFewPoints(usize),
    #[error("waypoint {index} has negative speed {speed}")]
    NegativeSpeed { index: usize, speed: f64 },
    #[error("waypoint {index} is not finite")]
    NonFinite { index: usize },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64, speed: f64) -> Self {
        Self { x, y, speed }
    }
}

/// Closest point on a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    /// Fraction along the segment, in `[0, 1]`.
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub distance: f64,
    /// Arc length from the first waypoint.
    pub arc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    points: Vec<Waypoint>,
    closed: bool,
    cumulative: Vec<f64>,
}

impl WaypointPath {
    pub fn new(points: Vec<Waypoint>, closed: bool) -> Result<Self, PathError> {
        if points.len() < 2 {
            return Err(PathError::TooFewPoints(points.len()));
        }
        for (index, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.speed.is_finite()) {
                return Err(PathError::NonFinite { index });
            }
            if p.speed < 0.0 {
                return Err(PathError::NegativeSpeed { index, speed: p.speed });
            }
        }
        let mut path = Self {
            points,
            closed,
            cumulative: Vec::new(),
        };
        let mut acc = 0.0;
        path.cumulative.push(0.0);
        for i in 0..path.segment_count() {
            let (a, b) = path.segment(i);
            acc += (b.x - a.x).hypot(b.y - a.y);
            path.cumulative.push(acc);
        }
        Ok(path)
    }

    pub fn points(&self) -> &[Waypoint] {
        &self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Number of segments; a closed path includes the last-to-first edge.
    pub fn segment_count(&self) -> usize {
        if self.closed {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }

    pub fn segment(&self, i: usize) -> (Waypoint, Waypoint) {
        let n = self.points.len();
        (self.points[i % n], self.points[(i + 1) % n])
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn project_onto_segment(&self, i: usize, x: f64, y: f64) -> Projection {
        let (a, b) = self.segment(i);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - a.x) * dx + (y - a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let px = a.x + t * dx;
        let py = a.y + t * dy;
        Projection {
            segment: i,
            t,
            x: px,
            y: py,
            distance: (x - px).hypot(y - py),
            arc: self.cumulative[i] + t * len2.sqrt(),
        }
    }

    /// Closest point over every segment; ties go to the lowest index.
    pub fn project(&self, x: f64, y: f64) -> Projection {
        self.project_range(x, y, 0, self.segment_count())
    }

    /// Closest point among `count` segments starting at `start` (wrapping
    /// on closed paths, truncated on open ones).
    pub fn project_range(&self, x: f64, y: f64, start: usize, count: usize) -> Projection {
        let n = self.segment_count();
        let mut best = self.project_onto_segment(start % n, x, y);
        for k in 1..count.min(n) {
            let i = start + k;
            if !self.closed && i >= n {
                break;
            }
            let p = self.project_onto_segment(i % n, x, y);
            if p.distance < best.distance {
                best = p;
            }
        }
        best
    }

    /// Point, unit tangent heading and interpolated speed at arc length
    /// `s`; wraps on closed paths and returns `None` past an open end.
    pub fn sample_at(&self, s: f64) -> Option<(f64, f64, f64, f64)> {
        let total = self.length();
        let s = if self.closed {
            s.rem_euclid(total)
        } else if (0.0..=total).contains(&s) {
            s
        } else {
            return None;
        };
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.segment_count() - 1),
            Err(i) => i.saturating_sub(1).min(self.segment_count() - 1),
        };
        let (a, b) = self.segment(i);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let t = if len > 0.0 { ((s - self.cumulative[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
        Some((
            a.x + t * (b.x - a.x),
            a.y + t * (b.y - a.y),
            (b.y - a.y).atan2(b.x - a.x),
            a.speed + t * (b.speed - a.speed),
        ))
    }

    /// Signed lateral offset of a point from the path, positive on the left.
    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        let p = self.project(x, y);
        let (a, b) = self.segment(p.segment);
        let cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        p.distance.copysign(if cross == 0.0 { 1.0 } else { cross })
    }
}

/// Reads `x,y[,speed]` rows; `#` starts a comment line. Rows without a
/// speed column get `default_speed`.
pub fn parse_waypoints(text: &str, closed: bool, default_speed: f64) -> Result<WaypointPath, PathError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !(2..=3).contains(&record.len()) {
            return Err(PathError::Parse {
                line,
                message: format!("expected x,y[,speed], got {} fields", record.len()),
            });
        }
        let field = |i: usize| -> Result<f64, PathError> {
            record[i].parse().map_err(|_| PathError::Parse {
                line,
                message: format!("`{}` is not a number", &record[i]),
            })
        };
        let speed = if record.len() == 3 { field(2)? } else { default_speed };
        points.push(Waypoint::new(field(0)?, field(1)?, speed));
    }
    WaypointPath::new(points, closed)
}

pub fn load_waypoints(path: impl AsRef<Path>, closed: bool, default_speed: f64) -> Result<WaypointPath, PathError> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| PathError::Csv(e.into()))?;
    parse_waypoints(&text, closed, default_speed)
}

pub fn waypoints_to_csv(path: &WaypointPath) -> String {
    let mut out = String::from("# x,y,speed\n");
    for p in path.points() {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.speed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_comments() {
        let p = parse_waypoints("# header\n0,0,1.5\n1, 0, 2\n\n# mid\n2,1\n", false, 0.7).unwrap();
        assert_eq!(p.points().len(), 3);
        assert_eq!(p.points()[1], Waypoint::new(1.0, 0.0, 2.0));
        assert_eq!(p.points()[2].speed, 0.7);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_waypoints("0,0,1\n", false, 1.0), Err(PathError::TooFewPoints(1))));
        assert!(matches!(
            parse_waypoints("0,0,1\n1,0,-1\n", false, 1.0),
            Err(PathError::NegativeSpeed { index: 1, .. })
        ));
        assert!(matches!(parse_waypoints("0,0,1\n1,a,1\n", false, 1.0), Err(PathError::Parse { .. })));
    }

    #[test]
    fn closed_length_and_sampling() {
        let sq = vec![
            Waypoint::new(0.0, 0.0, 1.0),
            Waypoint::new(1.0, 0.0, 2.0),
            Waypoint::new(1.0, 1.0, 1.0),
            Waypoint::new(0.0, 1.0, 1.0),
        ];
        let closed = WaypointPath::new(sq.clone(), true).unwrap();
        let open = WaypointPath::new(sq, false).unwrap();
        assert_eq!(closed.length(), 4.0);
        assert_eq!(open.length(), 3.0);
        let (x, y, h, v) = closed.sample_at(0.5).unwrap();
        assert_eq!((x, y, h, v), (0.5, 0.0, 0.0, 1.5));
        let (x, y, _, _) = closed.sample_at(4.25).unwrap();
        assert!((x - 0.25).abs() < 1e-12 && y.abs() < 1e-12);
        assert!(open.sample_at(3.5).is_none());
        assert!(closed.lateral_offset(0.5, 0.2) > 0.0);
        assert!(closed.lateral_offset(0.5, -0.2) < 0.0);
    }
}

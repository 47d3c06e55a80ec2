//! Planar poses, vehicle state, and oriented-rectangle geometry.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-PI, PI]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * ((a + PI) / two_pi).floor();
    // floor leaves w in [-PI, PI); fold the lower edge up
    if w <= -PI {
        w += two_pi;
    }
    if w > PI {
        w -= two_pi;
    }
    w
}

/// Signed shortest rotation from `b` to `a`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::default()
    }

    /// `self ∘ other`: interprets `other` in the frame of `self` and
    /// returns it in the parent frame.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Maps a world point into this frame.
    pub fn point_to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Maps a point expressed in this frame into the world.
    pub fn point_to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Expresses `point` in the coordinate frame `frame`.
pub fn to_local_frame(frame: &Pose2D, point: &Pose2D) -> Pose2D {
    let (x, y) = frame.point_to_local(point.x, point.y);
    Pose2D::new(x, y, angle_diff(point.theta, frame.theta))
}

/// Inverse of [`to_local_frame`].
pub fn from_local_frame(frame: &Pose2D, local: &Pose2D) -> Pose2D {
    frame.compose(local)
}

/// Pose, speed and path curvature of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub v: f64,
    pub kappa: f64,
}

impl VehicleState {
    pub fn new(pose: Pose2D, v: f64, kappa: f64) -> Self {
        Self { pose, v, kappa }
    }

    pub fn at_rest(pose: Pose2D) -> Self {
        Self::new(pose, 0.0, 0.0)
    }
}

/// Speed setpoint and commanded curvature.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub speed: f64,
    pub kappa: f64,
}

impl ControlCommand {
    pub fn new(speed: f64, kappa: f64) -> Self {
        Self { speed, kappa }
    }

    pub fn stop() -> Self {
        Self::default()
    }

    pub fn clamped(self, v_max: f64, kappa_max: f64) -> Self {
        Self {
            speed: self.speed.clamp(0.0, v_max),
            kappa: self.kappa.clamp(-kappa_max, kappa_max),
        }
    }
}

/// Oriented rectangle centred on `pose`, `length` along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub pose: Pose2D,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(pose: Pose2D, length: f64, width: f64) -> Self {
        Self {
            pose,
            length,
            width,
        }
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            self.pose.point_to_world(hl, hw),
            self.pose.point_to_world(-hl, hw),
            self.pose.point_to_world(-hl, -hw),
            self.pose.point_to_world(hl, -hw),
        ]
    }

    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.pose.theta.sin_cos();
        [(c, s), (-s, c)]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.pose.point_to_local(x, y);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }

    /// Separating-axis overlap test; touching edges count as overlap.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let a = self.corners();
        let b = other.corners();
        self.axes()
            .into_iter()
            .chain(other.axes())
            .all(|axis| overlaps_on_axis(&a, &b, axis))
    }

    /// Overlap with an axis-aligned box `[x0,x1]×[y0,y1]`.
    pub fn intersects_aabb(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        let a = self.corners();
        let b = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)];
        [(1.0, 0.0), (0.0, 1.0)]
            .into_iter()
            .chain(self.axes())
            .all(|axis| overlaps_on_axis(&a, &b, axis))
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    pub fn distance_to_point(&self, x: f64, y: f64) -> f64 {
        let (lx, ly) = self.pose.point_to_local(x, y);
        let dx = (lx.abs() - 0.5 * self.length).max(0.0);
        let dy = (ly.abs() - 0.5 * self.width).max(0.0);
        dx.hypot(dy)
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let c = self.corners();
        let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in c {
            bb.0 = bb.0.min(x);
            bb.1 = bb.1.min(y);
            bb.2 = bb.2.max(x);
            bb.3 = bb.3.max(y);
        }
        bb
    }
}

fn overlaps_on_axis(a: &[(f64, f64); 4], b: &[(f64, f64); 4], axis: (f64, f64)) -> bool {
    let project = |pts: &[(f64, f64); 4]| {
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, y)| {
            let p = x * axis.0 + y * axis.1;
            (lo.min(p), hi.max(p))
        })
    };
    let (amin, amax) = project(a);
    let (bmin, bmax) = project(b);
    amax >= bmin && bmax >= amin
}

/// Distance from a point to the axis-aligned box `[x0,x1]×[y0,y1]`.
pub fn point_aabb_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let dx = (x0 - px).max(0.0).max(px - x1);
    let dy = (y0 - py).max(0.0).max(py - y1);
    dx.hypot(dy)
}

//! Follow-The-Gap: steer toward the centre of the widest free angular gap,
//! blended with a goal heading.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::ControlCommand;
use crate::raycast::LaserScan;

#[derive(Debug, Error, PartialEq)]
pub enum FtgError {
    #[error("no gaps to choose from")]
    EmptyGapList,
    #[error("invalid FTG configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Contiguous run of beams beyond the gap threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub start_idx: usize,
    pub end_idx: usize,
    /// Vehicle-frame angle of the run's midpoint.
    pub center_angle: f64,
    /// Angular span covered by the run's beams.
    pub angular_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtgConfig {
    pub gap_threshold: f64,
    /// Weight of the gap heading (scaled by 1/d_min).
    pub alpha: f64,
    /// Weight of the goal heading.
    pub beta: f64,
    pub speed_nominal: f64,
    /// Clearance at which speed reaches zero.
    pub d_stop: f64,
    /// Clearance at and above which speed is nominal.
    pub d_full: f64,
    /// Heading-to-curvature gain, 1/(rad·m).
    pub steering_gain: f64,
    pub kappa_max: f64,
}

impl Default for FtgConfig {
    fn default() -> Self {
        Self {
            gap_threshold: 1.5,
            alpha: 4.0,
            beta: 1.0,
            speed_nominal: 2.0,
            d_stop: 0.2,
            d_full: 1.0,
            steering_gain: 2.0,
            kappa_max: 3.0,
        }
    }
}

impl FtgConfig {
    pub fn validate(&self) -> Result<(), FtgError> {
        if !(self.gap_threshold > 0.0) {
            return Err(FtgError::InvalidConfig("gap_threshold must be positive"));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.alpha + self.beta > 0.0) {
            return Err(FtgError::InvalidConfig("alpha, beta must be non-negative with a positive sum"));
        }
        if !(self.d_full > self.d_stop) {
            return Err(FtgError::InvalidConfig("d_full must exceed d_stop"));
        }
        Ok(())
    }
}

/// Minimum clearance used in the fusion weight.
pub const MIN_CLEARANCE_FLOOR: f64 = 0.05;

fn make_gap(scan: &LaserScan, start_idx: usize, end_idx: usize) -> Gap {
    let inc = scan.angle_increment();
    Gap {
        start_idx,
        end_idx,
        center_angle: scan.angle_min + 0.5 * (start_idx + end_idx) as f64 * inc,
        angular_width: (end_idx - start_idx + 1) as f64 * inc,
    }
}

/// Maximal runs of beams with `range > threshold`, in index order.
pub fn build_gap_array(scan: &LaserScan, threshold: f64) -> Vec<Gap> {
    let mut gaps = Vec::new();
    let mut start = None;
    for (i, &r) in scan.ranges.iter().enumerate() {
        match (r > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                gaps.push(make_gap(scan, s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        gaps.push(make_gap(scan, s, scan.ranges.len() - 1));
    }
    gaps
}

/// Widest gap; ties go to the most head-on, then the lowest start index.
pub fn find_max_gap(gaps: &[Gap]) -> Result<Gap, FtgError> {
    gaps.iter()
        .copied()
        .min_by(|a, b| {
            b.angular_width
                .total_cmp(&a.angular_width)
                .then(a.center_angle.abs().total_cmp(&b.center_angle.abs()))
                .then(a.start_idx.cmp(&b.start_idx))
        })
        .ok_or(FtgError::EmptyGapList)
}

/// Vehicle-frame angle of the gap's middle beam (rounded down).
pub fn gap_center_heading(gap: &Gap, scan: &LaserScan) -> f64 {
    scan.beam_angle((gap.start_idx + gap.end_idx) / 2)
}

/// Convex blend of the gap and goal headings; closer obstacles pull
/// harder toward the gap.
pub fn fuse_headings(theta_gap: f64, theta_goal: f64, d_min: f64, alpha: f64, beta: f64) -> f64 {
    let wg = alpha / d_min.max(MIN_CLEARANCE_FLOOR);
    let lambda = beta / (wg + beta);
    (1.0 - lambda) * theta_gap + lambda * theta_goal
}

pub fn ftg_command(scan: &LaserScan, goal_angle: f64, cfg: &FtgConfig) -> ControlCommand {
    let gaps = build_gap_array(scan, cfg.gap_threshold);
    let Ok(gap) = find_max_gap(&gaps) else {
        return ControlCommand::stop();
    };
    let d_min = scan.min_range().max(MIN_CLEARANCE_FLOOR);
    let theta = fuse_headings(gap_center_heading(&gap, scan), goal_angle, d_min, cfg.alpha, cfg.beta);
    let scale = ((d_min - cfg.d_stop) / (cfg.d_full - cfg.d_stop)).clamp(0.0, 1.0);
    ControlCommand {
        speed: cfg.speed_nominal * scale,
        kappa: (theta * cfg.steering_gain).clamp(-cfg.kappa_max, cfg.kappa_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn scan(ranges: Vec<f64>, span: f64) -> LaserScan {
        LaserScan {
            angle_min: -span / 2.0,
            angle_max: span / 2.0,
            range_max: 10.0,
            ranges,
        }
    }

    #[test]
    fn gap_examples() {
        let s = scan(vec![5.0, 5.0, 1.0, 1.0, 5.0, 5.0, 5.0], PI);
        let g: Vec<_> = build_gap_array(&s, 2.0).iter().map(|g| (g.start_idx, g.end_idx)).collect();
        assert_eq!(g, vec![(0, 1), (4, 6)]);
        assert!(build_gap_array(&scan(vec![1.0; 9], PI), 2.0).is_empty());
        let full = build_gap_array(&scan(vec![10.0; 9], PI), 2.0);
        assert_eq!(full.len(), 1);
        assert_eq!((full[0].start_idx, full[0].end_idx), (0, 8));
    }

    fn gap(width: f64, center: f64, start: usize) -> Gap {
        Gap { start_idx: start, end_idx: start, center_angle: center, angular_width: width }
    }

    #[test]
    fn max_gap_selection() {
        let g = [gap(0.3, 0.0, 0), gap(0.9, 0.5, 10), gap(0.5, 0.1, 20)];
        assert_eq!(find_max_gap(&g).unwrap().angular_width, 0.9);
        let g = [gap(0.5, -0.4, 0), gap(0.5, 0.1, 30), gap(0.5, 0.4, 60)];
        assert_eq!(find_max_gap(&g).unwrap().center_angle, 0.1);
        assert_eq!(find_max_gap(&[]), Err(FtgError::EmptyGapList));
    }

    #[test]
    fn centre_heading() {
        let s = scan(vec![10.0; 1081], 270f64.to_radians());
        let full = find_max_gap(&build_gap_array(&s, 1.0)).unwrap();
        assert!(gap_center_heading(&full, &s).abs() < 1e-12);
        let g = Gap { start_idx: 0, end_idx: 10, center_angle: 0.0, angular_width: 0.0 };
        let expected = (-135.0f64 + 5.0 * 0.25).to_radians();
        assert!((gap_center_heading(&g, &s) - expected).abs() < 1e-12);
        let one = Gap { start_idx: 7, end_idx: 7, center_angle: 0.0, angular_width: 0.0 };
        assert_eq!(gap_center_heading(&one, &s), s.beam_angle(7));
        let odd = Gap { start_idx: 2, end_idx: 5, center_angle: 0.0, angular_width: 0.0 };
        assert_eq!(gap_center_heading(&odd, &s), s.beam_angle(3));
    }

    #[test]
    fn fusion_edges() {
        assert_eq!(fuse_headings(0.7, -0.2, 1.3, 4.0, 0.0), 0.7);
        assert_eq!(fuse_headings(0.7, -0.2, 1.3, 0.0, 1.0), -0.2);
    }

    #[test]
    fn blocked_scan_stops() {
        let s = scan(vec![0.5; 100], PI);
        assert_eq!(ftg_command(&s, 0.0, &FtgConfig::default()), ControlCommand::stop());
    }

    #[test]
    fn right_obstacle_turns_left() {
        let mut r = vec![8.0; 271];
        r[..135].iter_mut().for_each(|x| *x = 0.8);
        let s = scan(r, 270f64.to_radians());
        let cmd = ftg_command(&s, 0.0, &FtgConfig::default());
        assert!(cmd.kappa > 0.0);
        assert!(cmd.speed > 0.0);
    }
}

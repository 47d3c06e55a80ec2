//! Monte Carlo localization against a known map.
//!
//! Expected ranges come from [`cast_ray`]; each particle's likelihood is a
//! product of independent Gaussian beam terms evaluated in log space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose2D;
use crate::map::{Cell, OccupancyGrid};
use crate::raycast::{cast_ray, LaserScan};
use crate::sim::{gaussian, OdomDelta};

#[derive(Debug, Error, PartialEq)]
pub enum LocalizeError {
    #[error("the map has no free cell to sample from")]
    NoFreeSpace,
    #[error("particle count must be at least 1")]
    NoParticles,
    #[error("subsample factor must be at least 1")]
    BadSubsample,
    #[error("all particle weights vanished; weights were reset to uniform")]
    DegenerateWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub pose: Pose2D,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    UniformFree,
    Gaussian { pose: Pose2D, sigma_xy: f64, sigma_theta: f64 },
}

/// Defaults are tuning choices, not calibrated sensor values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub particles: usize,
    /// Use every k-th beam of the scan.
    pub subsample_k: usize,
    pub sigma_z: f64,
    pub march_step: f64,
    pub motion_sigma_xy: f64,
    pub motion_sigma_theta: f64,
    /// Share of particles replaced by uniform draws before an update while
    /// the previous fit was poor.
    pub inject_fraction: f64,
    /// Mean per-beam log-likelihood of the best particle below which the
    /// filter counts as not locked on.
    pub fit_threshold: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            subsample_k: 18,
            sigma_z: 0.1,
            march_step: 0.025,
            motion_sigma_xy: 0.02,
            motion_sigma_theta: 0.02,
            inject_fraction: 0.1,
            fit_threshold: -2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    /// Builds a set from explicit particles; weights are normalized.
    pub fn from_particles(mut particles: Vec<Particle>, seed: u64) -> Result<Self, LocalizeError> {
        if particles.is_empty() {
            return Err(LocalizeError::NoParticles);
        }
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        if total > 0.0 && total.is_finite() {
            particles.iter_mut().for_each(|p| p.weight /= total);
        }
        Ok(Self {
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// 1 / Σw² over normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
    }

    fn reset_weights(&mut self) {
        let w = 1.0 / self.particles.len() as f64;
        self.particles.iter_mut().for_each(|p| p.weight = w);
    }

    /// Weighted mean position and circular mean heading.
    pub fn estimate(&self) -> Pose2D {
        let (mut x, mut y, mut s, mut c, mut total) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in &self.particles {
            x += p.weight * p.pose.x;
            y += p.weight * p.pose.y;
            s += p.weight * p.pose.theta.sin();
            c += p.weight * p.pose.theta.cos();
            total += p.weight;
        }
        Pose2D::new(x / total, y / total, s.atan2(c))
    }
}

fn uniform_free_pose<R: Rng + ?Sized>(grid: &OccupancyGrid, free: &[Cell], rng: &mut R) -> Pose2D {
    let res = grid.resolution();
    let (c, r) = free[rng.random_range(0..free.len())];
    let lx = (c as f64 + rng.random::<f64>()) * res;
    let ly = (r as f64 + rng.random::<f64>()) * res;
    let (x, y) = grid.origin().point_to_world(lx, ly);
    let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Pose2D::new(x, y, theta)
}

pub fn init_particles(grid: &OccupancyGrid, n: usize, mode: InitMode, seed: u64) -> Result<ParticleSet, LocalizeError> {
    if n == 0 {
        return Err(LocalizeError::NoParticles);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = 1.0 / n as f64;
    let particles = match mode {
        InitMode::UniformFree => {
            let free = grid.free_cells();
            if free.is_empty() {
                return Err(LocalizeError::NoFreeSpace);
            }
            (0..n)
                .map(|_| Particle {
                    pose: uniform_free_pose(grid, &free, &mut rng),
                    weight: w,
                })
                .collect()
        }
        InitMode::Gaussian {
            pose,
            sigma_xy,
            sigma_theta,
        } => (0..n)
            .map(|_| Particle {
                pose: Pose2D::new(
                    pose.x + gaussian(&mut rng, sigma_xy),
                    pose.y + gaussian(&mut rng, sigma_xy),
                    pose.theta + gaussian(&mut rng, sigma_theta),
                ),
                weight: w,
            })
            .collect(),
    };
    Ok(ParticleSet { particles, rng })
}

/// Moves every particle by the body-frame odometry delta plus independent
/// Gaussian noise.
pub fn motion_update(set: &mut ParticleSet, odom: &OdomDelta, sigma_xy: f64, sigma_theta: f64) {
    let ParticleSet { particles, rng } = set;
    for p in particles.iter_mut() {
        let delta = Pose2D::new(
            odom.dx + gaussian(rng, sigma_xy),
            odom.dy + gaussian(rng, sigma_xy),
            odom.dtheta + gaussian(rng, sigma_theta),
        );
        p.pose = p.pose.compose(&delta);
    }
}

/// Log-likelihood of `scan` from `pose`, using every `k`-th beam.
pub fn scan_log_likelihood(
    grid: &OccupancyGrid,
    pose: &Pose2D,
    scan: &LaserScan,
    k: usize,
    sigma_z: f64,
    march_step: f64,
) -> f64 {
    let inv = 1.0 / (2.0 * sigma_z * sigma_z);
    (0..scan.beam_count())
        .step_by(k)
        .map(|i| {
            let expected = cast_ray(grid, pose, pose.theta + scan.beam_angle(i), scan.range_max, march_step);
            let e = scan.ranges[i] - expected;
            -e * e * inv
        })
        .sum()
}

/// Reweights particles by the scan likelihood and renormalizes. Returns the
/// best particle's mean per-beam log-likelihood.
///
/// Particle likelihoods are computed in parallel and reduced in index
/// order, so results do not depend on the thread count.
pub fn sensor_update(
    set: &mut ParticleSet,
    scan: &LaserScan,
    grid: &OccupancyGrid,
    subsample_k: usize,
    sigma_z: f64,
    march_step: f64,
) -> Result<f64, LocalizeError> {
    if subsample_k == 0 {
        return Err(LocalizeError::BadSubsample);
    }
    let ll: Vec<f64> = set
        .particles
        .par_iter()
        .map(|p| scan_log_likelihood(grid, &p.pose, scan, subsample_k, sigma_z, march_step))
        .collect();
    let beams = scan.beam_count().div_ceil(subsample_k) as f64;
    let best = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max) / beams;
    let log_w: Vec<f64> = set.particles.iter().zip(&ll).map(|(p, l)| p.weight.ln() + l).collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        set.reset_weights();
        return Err(LocalizeError::DegenerateWeights);
    }
    let mut total = 0.0;
    for (p, lw) in set.particles.iter_mut().zip(&log_w) {
        p.weight = (lw - max).exp();
        total += p.weight;
    }
    set.particles.iter_mut().for_each(|p| p.weight /= total);
    Ok(best)
}

/// Systematic resampling when N_eff < n/2, then the pose estimate.
pub fn resample_and_estimate(set: &mut ParticleSet) -> Pose2D {
    let n = set.particles.len();
    if set.effective_sample_size() < n as f64 / 2.0 {
        let step = 1.0 / n as f64;
        let start = set.rng.random::<f64>() * step;
        let mut out = Vec::with_capacity(n);
        let mut cumulative = set.particles[0].weight;
        let mut i = 0;
        for m in 0..n {
            let u = start + m as f64 * step;
            while u > cumulative && i + 1 < n {
                i += 1;
                cumulative += set.particles[i].weight;
            }
            out.push(Particle {
                pose: set.particles[i].pose,
                weight: step,
            });
        }
        set.particles = out;
    }
    set.estimate()
}

/// Particle filter bundling the set with its configuration.
#[derive(Debug, Clone)]
pub struct Localizer {
    pub config: LocalizerConfig,
    pub set: ParticleSet,
    pub degenerate_updates: usize,
    /// Best mean per-beam log-likelihood of the last update.
    pub last_fit: Option<f64>,
    pub injected: usize,
    free: Vec<Cell>,
}

impl Localizer {
    pub fn new(grid: &OccupancyGrid, config: LocalizerConfig, mode: InitMode, seed: u64) -> Result<Self, LocalizeError> {
        Ok(Self {
            set: init_particles(grid, config.particles, mode, seed)?,
            config,
            degenerate_updates: 0,
            last_fit: None,
            injected: 0,
            free: grid.free_cells(),
        })
    }

    pub fn predict(&mut self, odom: &OdomDelta) {
        motion_update(&mut self.set, odom, self.config.motion_sigma_xy, self.config.motion_sigma_theta);
    }

    /// Sensor update followed by resampling; returns the new estimate.
    pub fn correct(&mut self, scan: &LaserScan, grid: &OccupancyGrid) -> Result<Pose2D, LocalizeError> {
        let c = self.config;
        if self.last_fit.is_some_and(|f| f < c.fit_threshold) {
            self.inject(grid);
        }
        match sensor_update(&mut self.set, scan, grid, c.subsample_k, c.sigma_z, c.march_step) {
            Ok(fit) => self.last_fit = Some(fit),
            Err(LocalizeError::DegenerateWeights) => {
                self.degenerate_updates += 1;
                self.last_fit = Some(f64::NEG_INFINITY);
            }
            Err(e) => return Err(e),
        }
        Ok(resample_and_estimate(&mut self.set))
    }

    /// Replaces the lowest-weight particles with uniform draws over free space.
    fn inject(&mut self, grid: &OccupancyGrid) {
        let n = self.set.particles.len();
        let m = ((n as f64 * self.config.inject_fraction).ceil() as usize).min(n);
        if m == 0 || self.free.is_empty() {
            return;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.set.particles[a].weight.total_cmp(&self.set.particles[b].weight));
        let w = 1.0 / n as f64;
        let ParticleSet { particles, rng } = &mut self.set;
        for &i in &order[..m] {
            particles[i] = Particle {
                pose: uniform_free_pose(grid, &self.free, rng),
                weight: w,
            };
        }
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        particles.iter_mut().for_each(|p| p.weight /= total);
        self.injected += m;
    }
}

//! Gaussian RBF interpolator of the goal → spline-parameter map.
//!
//! Trained offline on solver output over a goal lattice; inference is a
//! single weighted kernel sum, cheap enough to replace the solver online.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, Pose2D, VehicleState};
use crate::lattice::{integrate_endpoint, solve_bvp, BvpOptions, Goal, SplineParams, TrajectoryGenerator};

const FORMAT_HEADER: &str = "racekit-rbf v1";
const JITTER: f64 = 1e-10;
const MAX_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum RbfError {
    #[error("only {converged} of {total} goals converged, need at least 4")]
    InsufficientData { converged: usize, total: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("kernel matrix is singular (relative residual {residual:e})")]
    SingularKernel { residual: f64 },
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("network has not been trained")]
    Untrained,
    #[error("network file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Evenly spaced values over `[min, max]`; a single count yields the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Self {
        Self { min, max, count }
    }

    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Midpoints between consecutive values.
    pub fn midpoints(&self) -> Vec<f64> {
        let v = self.values();
        v.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn extent(&self) -> f64 {
        self.max - self.min
    }
}

/// Rectangular goal lattice over (x, y, Ψ) in the start frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalLattice {
    pub x: Axis,
    pub y: Axis,
    pub theta: Axis,
}

impl Default for GoalLattice {
    fn default() -> Self {
        Self {
            x: Axis::new(1.0, 4.0, 9),
            y: Axis::new(-1.5, 1.5, 9),
            theta: Axis::new(-0.6, 0.6, 3),
        }
    }
}

fn cartesian(xs: &[f64], ys: &[f64], ts: &[f64]) -> Vec<Pose2D> {
    let mut out = Vec::with_capacity(xs.len() * ys.len() * ts.len());
    for &x in xs {
        for &y in ys {
            for &t in ts {
                out.push(Pose2D::new(x, y, t));
            }
        }
    }
    out
}

impl GoalLattice {
    pub fn points(&self) -> Vec<Pose2D> {
        cartesian(&self.x.values(), &self.y.values(), &self.theta.values())
    }

    /// Cell centres of the lattice. An axis with a single value keeps it.
    pub fn midpoints(&self) -> Vec<Pose2D> {
        let mid = |a: &Axis| if a.count > 1 { a.midpoints() } else { a.values() };
        cartesian(&mid(&self.x), &mid(&self.y), &mid(&self.theta))
    }

    /// Same bounds with `factor`× as many intervals per axis with more than one value.
    pub fn refined(&self, factor: usize) -> Self {
        let r = |a: Axis| {
            if a.count > 1 {
                Axis::new(a.min, a.max, (a.count - 1) * factor + 1)
            } else {
                a
            }
        };
        Self {
            x: r(self.x),
            y: r(self.y),
            theta: r(self.theta),
        }
    }

    /// Position and heading scales for the endpoint error norm.
    pub fn error_scale(&self) -> ErrorScale {
        ErrorScale {
            x: self.x.extent(),
            y: self.y.extent(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub goal: Pose2D,
    pub params: SplineParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    /// Goals dropped because the solver failed on them.
    pub excluded: usize,
    /// Start curvature the set was solved from.
    pub a: f64,
}

/// Solves every lattice goal from `x0`, keeping lattice order.
pub fn build_training_set(x0: &VehicleState, goals: &[Pose2D], opts: &BvpOptions) -> Result<TrainingSet, RbfError> {
    let start = VehicleState {
        pose: Pose2D::origin(),
        ..*x0
    };
    let solved: Vec<Option<TrainingSample>> = goals
        .par_iter()
        .map(|g| {
            let goal = Goal { pose: *g, kappa: 0.0 };
            solve_bvp(&start, &goal, opts).ok().map(|s| TrainingSample {
                goal: *g,
                params: s.params,
            })
        })
        .collect();
    let samples: Vec<TrainingSample> = solved.into_iter().flatten().collect();
    if samples.len() < 4 {
        return Err(RbfError::InsufficientData {
            converged: samples.len(),
            total: goals.len(),
        });
    }
    Ok(TrainingSet {
        excluded: goals.len() - samples.len(),
        samples,
        a: x0.kappa,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RbfNetwork {
    /// Normalized centres, row-major M×3.
    centers: Vec<f64>,
    /// Row-major M×4 weights in z-scored output space.
    weights: Vec<f64>,
    epsilon: f64,
    in_center: [f64; 3],
    in_half_range: [f64; 3],
    out_mean: [f64; 4],
    out_std: [f64; 4],
    a: f64,
    training_residual: f64,
    jitter_applied: bool,
    trained: bool,
}

fn outputs(p: &SplineParams) -> [f64; 4] {
    [p.s, p.b, p.c, p.d]
}

fn inputs(g: &Pose2D) -> [f64; 3] {
    [g.x, g.y, g.theta]
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median gap between consecutive distinct values along one axis.
fn median_axis_gap(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut gaps: Vec<f64> = v.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// Median distance from each centre to its nearest neighbour.
fn median_nn_distance(centers: &[f64], m: usize) -> Option<f64> {
    if m < 2 {
        return None;
    }
    let mut nn: Vec<f64> = (0..m)
        .map(|i| {
            let ci = &centers[3 * i..3 * i + 3];
            (0..m)
                .filter(|&j| j != i)
                .map(|j| dist2(ci, &centers[3 * j..3 * j + 3]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    Some(if m % 2 == 1 {
        nn[m / 2]
    } else {
        0.5 * (nn[m / 2 - 1] + nn[m / 2])
    })
}

/// Max over output columns of ‖ΦW − Y‖∞ / ‖Y‖∞ (absolute for all-zero columns).
fn relative_residual(phi: &DMatrix<f64>, w: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let r = phi * w - y;
    (0..y.ncols())
        .map(|k| {
            let scale = y.column(k).amax();
            let err = r.column(k).amax();
            if scale > 0.0 {
                err / scale
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

/// Direct solve followed by two rounds of iterative refinement.
fn solve_refined(phi: &DMatrix<f64>, lhs: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = lhs.clone().lu();
    let mut w = lu.solve(y)?;
    for _ in 0..2 {
        let r = y - phi * &w;
        w += lu.solve(&r)?;
    }
    w.iter().all(|v| v.is_finite()).then_some(w)
}

/// How the kernel width is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// One over the median nearest-centre distance.
    MedianSpacing,
    /// The widest candidate kernel, relative to the median spacing, whose
    /// system still interpolates within the residual bound. Wider Gaussians
    /// interpolate smooth maps better until conditioning gives out.
    WidestStable,
    Fixed(f64),
}

/// ε·spacing candidates for the widest-stable rule, widest first.
const SHAPES: [f64; 9] = [0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 1.0];

fn kernel_matrix(centers: &[f64], m: usize, epsilon: f64) -> DMatrix<f64> {
    let e2 = epsilon * epsilon;
    DMatrix::from_fn(m, m, |i, j| {
        (-e2 * dist2(&centers[3 * i..3 * i + 3], &centers[3 * j..3 * j + 3])).exp()
    })
}

/// Weights for ΦW = Y, retrying with diagonal jitter when the direct solve
/// misses the residual bound. Returns (W, residual, jitter used).
fn fit(phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64, bool)> {
    let direct = solve_refined(phi, phi, y).map(|w| {
        let r = relative_residual(phi, &w, y);
        (w, r)
    });
    match direct {
        Some((w, r)) if r <= MAX_RESIDUAL => Some((w, r, false)),
        _ => {
            let m = phi.nrows();
            let jittered = phi + DMatrix::identity(m, m) * JITTER;
            let w = solve_refined(phi, &jittered, y)?;
            let r = relative_residual(phi, &w, y);
            Some((w, r, true))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfOptions {
    pub epsilon: EpsilonRule,
    /// Rescale normalized axes so their lattice spacings match, giving
    /// per-axis kernel widths on anisotropic lattices.
    pub equalize_spacing: bool,
}

impl Default for RbfOptions {
    fn default() -> Self {
        Self {
            epsilon: EpsilonRule::WidestStable,
            equalize_spacing: true,
        }
    }
}

/// Fits the interpolator to the training set.
pub fn train_rbf(set: &TrainingSet, opts: &RbfOptions) -> Result<RbfNetwork, RbfError> {
    let m = set.samples.len();
    if m == 0 {
        return Err(RbfError::EmptyDataset);
    }
    let mut in_center = [0.0; 3];
    let mut in_half_range = [1.0; 3];
    for k in 0..3 {
        let (lo, hi) = set
            .samples
            .iter()
            .map(|s| inputs(&s.goal)[k])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        in_center[k] = 0.5 * (lo + hi);
        if hi > lo {
            in_half_range[k] = 0.5 * (hi - lo);
        }
    }
    if opts.equalize_spacing {
        let gaps: Vec<Option<f64>> = (0..3)
            .map(|k| median_axis_gap(set.samples.iter().map(|s| inputs(&s.goal)[k] / in_half_range[k])))
            .collect();
        if let Some(h_ref) = gaps.iter().flatten().copied().reduce(f64::min) {
            for k in 0..3 {
                if let Some(h) = gaps[k] {
                    in_half_range[k] *= h / h_ref;
                }
            }
        }
    }
    let mut out_mean = [0.0; 4];
    let mut out_std = [1.0; 4];
    for k in 0..4 {
        let mean = set.samples.iter().map(|s| outputs(&s.params)[k]).sum::<f64>() / m as f64;
        let var = set
            .samples
            .iter()
            .map(|s| (outputs(&s.params)[k] - mean).powi(2))
            .sum::<f64>()
            / m as f64;
        out_mean[k] = mean;
        if var > 0.0 {
            out_std[k] = var.sqrt();
        }
    }

    let mut centers = Vec::with_capacity(3 * m);
    for s in &set.samples {
        let g = inputs(&s.goal);
        for k in 0..3 {
            centers.push((g[k] - in_center[k]) / in_half_range[k]);
        }
    }
    for i in 0..m {
        for j in 0..i {
            if dist2(&centers[3 * i..3 * i + 3], &centers[3 * j..3 * j + 3]) == 0.0 {
                return Err(RbfError::SingularKernel {
                    residual: f64::INFINITY,
                });
            }
        }
    }

    let y = DMatrix::from_fn(m, 4, |i, k| (outputs(&set.samples[i].params)[k] - out_mean[k]) / out_std[k]);
    let spacing = median_nn_distance(&centers, m);
    let epsilon = match opts.epsilon {
        EpsilonRule::Fixed(e) => e,
        EpsilonRule::MedianSpacing => spacing.map_or(1.0, |d| 1.0 / d),
        EpsilonRule::WidestStable => {
            let h = spacing.unwrap_or(1.0);
            let fixed = |eps| RbfOptions {
                epsilon: EpsilonRule::Fixed(eps),
                ..*opts
            };
            let mut last = None;
            for c in SHAPES {
                match train_rbf(set, &fixed(c / h)) {
                    Ok(net) => return Ok(net),
                    Err(e) => last = Some(e),
                }
            }
            return Err(last.unwrap_or(RbfError::SingularKernel {
                residual: f64::INFINITY,
            }));
        }
    };
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(RbfError::BadEpsilon(epsilon));
    }

    let phi = kernel_matrix(&centers, m, epsilon);
    let (w, residual, jitter_applied) = fit(&phi, &y).ok_or(RbfError::SingularKernel {
        residual: f64::INFINITY,
    })?;
    if !(residual <= MAX_RESIDUAL) {
        return Err(RbfError::SingularKernel { residual });
    }

    let mut weights = Vec::with_capacity(4 * m);
    for i in 0..m {
        for k in 0..4 {
            weights.push(w[(i, k)]);
        }
    }
    let mut net = RbfNetwork {
        centers,
        weights,
        epsilon,
        in_center,
        in_half_range,
        out_mean,
        out_std,
        a: set.a,
        training_residual: 0.0,
        jitter_applied,
        trained: true,
    };
    // residual in physical units, as reconstructed by inference
    net.training_residual = net.reconstruction_residual(set)?.max(0.0);
    if !(net.training_residual <= MAX_RESIDUAL) {
        return Err(RbfError::SingularKernel {
            residual: net.training_residual,
        });
    }
    Ok(net)
}

impl RbfNetwork {
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn len(&self) -> usize {
        self.centers.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn start_curvature(&self) -> f64 {
        self.a
    }

    pub fn training_residual(&self) -> f64 {
        self.training_residual
    }

    pub fn jitter_applied(&self) -> bool {
        self.jitter_applied
    }

    pub fn infer(&self, goal: &Pose2D) -> Result<SplineParams, RbfError> {
        if !self.trained {
            return Err(RbfError::Untrained);
        }
        let g = inputs(goal);
        let q = [
            (g[0] - self.in_center[0]) / self.in_half_range[0],
            (g[1] - self.in_center[1]) / self.in_half_range[1],
            (g[2] - self.in_center[2]) / self.in_half_range[2],
        ];
        let e2 = self.epsilon * self.epsilon;
        let mut acc = [0.0; 4];
        for (c, w) in self.centers.chunks_exact(3).zip(self.weights.chunks_exact(4)) {
            let d0 = q[0] - c[0];
            let d1 = q[1] - c[1];
            let d2 = q[2] - c[2];
            let phi = (-e2 * (d0 * d0 + d1 * d1 + d2 * d2)).exp();
            acc[0] += phi * w[0];
            acc[1] += phi * w[1];
            acc[2] += phi * w[2];
            acc[3] += phi * w[3];
        }
        let out: [f64; 4] = std::array::from_fn(|k| acc[k] * self.out_std[k] + self.out_mean[k]);
        Ok(SplineParams::new(out[0], self.a, out[1], out[2], out[3]))
    }

    /// Max relative reconstruction error over the training targets.
    pub fn reconstruction_residual(&self, set: &TrainingSet) -> Result<f64, RbfError> {
        let mut err = [0.0f64; 4];
        let mut scale = [0.0f64; 4];
        for s in &set.samples {
            let p = outputs(&self.infer(&s.goal)?);
            let t = outputs(&s.params);
            for k in 0..4 {
                err[k] = err[k].max((p[k] - t[k]).abs());
                scale[k] = scale[k].max(t[k].abs());
            }
        }
        Ok((0..4)
            .map(|k| if scale[k] > 0.0 { err[k] / scale[k] } else { err[k] })
            .fold(0.0, f64::max))
    }

    /// Plain-text serialization; floats are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(out, "trained {}", self.trained);
        let _ = writeln!(out, "m {}", self.len());
        let _ = writeln!(out, "epsilon {:e}", self.epsilon);
        let _ = writeln!(out, "a {:e}", self.a);
        let _ = writeln!(out, "in_center {}", join(&self.in_center));
        let _ = writeln!(out, "in_half_range {}", join(&self.in_half_range));
        let _ = writeln!(out, "out_mean {}", join(&self.out_mean));
        let _ = writeln!(out, "out_std {}", join(&self.out_std));
        let _ = writeln!(out, "training_residual {:e}", self.training_residual);
        let _ = writeln!(out, "jitter_applied {}", self.jitter_applied);
        for (c, w) in self.centers.chunks_exact(3).zip(self.weights.chunks_exact(4)) {
            let _ = writeln!(out, "{} {}", join(c), join(w));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RbfError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let err = |line: usize, message: &str| RbfError::Format {
            line,
            message: message.to_string(),
        };
        let mut next = |key: &str| -> Result<(usize, String), RbfError> {
            let (n, l) = lines.next().ok_or_else(|| err(0, &format!("missing `{key}`")))?;
            let rest = l
                .strip_prefix(key)
                .ok_or_else(|| err(n, &format!("expected `{key}`")))?;
            Ok((n, rest.trim().to_string()))
        };
        let (n, header) = next("racekit-rbf")?;
        if format!("racekit-rbf {header}") != FORMAT_HEADER {
            return Err(err(n, &format!("unsupported version `{header}`")));
        }
        fn floats(n: usize, s: &str) -> Result<Vec<f64>, RbfError> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| RbfError::Format {
                        line: n,
                        message: format!("bad number `{t}`"),
                    })
                })
                .collect()
        }
        fn fixed<const K: usize>(n: usize, s: &str) -> Result<[f64; K], RbfError> {
            floats(n, s)?.try_into().map_err(|_| RbfError::Format {
                line: n,
                message: format!("expected {K} numbers"),
            })
        }
        fn flag(n: usize, s: &str) -> Result<bool, RbfError> {
            s.parse().map_err(|_| RbfError::Format {
                line: n,
                message: format!("bad flag `{s}`"),
            })
        }
        let (n, s) = next("trained")?;
        let trained = flag(n, &s)?;
        let (n, s) = next("m")?;
        let m: usize = s.parse().map_err(|_| err(n, "bad count"))?;
        let (n, s) = next("epsilon")?;
        let [epsilon] = fixed::<1>(n, &s)?;
        let (n, s) = next("a")?;
        let [a] = fixed::<1>(n, &s)?;
        let (n, s) = next("in_center")?;
        let in_center = fixed::<3>(n, &s)?;
        let (n, s) = next("in_half_range")?;
        let in_half_range = fixed::<3>(n, &s)?;
        let (n, s) = next("out_mean")?;
        let out_mean = fixed::<4>(n, &s)?;
        let (n, s) = next("out_std")?;
        let out_std = fixed::<4>(n, &s)?;
        let (n, s) = next("training_residual")?;
        let [training_residual] = fixed::<1>(n, &s)?;
        let (n, s) = next("jitter_applied")?;
        let jitter_applied = flag(n, &s)?;
        let mut centers = Vec::with_capacity(3 * m);
        let mut weights = Vec::with_capacity(4 * m);
        for _ in 0..m {
            let (n, row) = next("")?;
            let row = fixed::<7>(n, &row)?;
            centers.extend_from_slice(&row[..3]);
            weights.extend_from_slice(&row[3..]);
        }
        if let Some((n, l)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(err(n, &format!("trailing content `{l}`")));
        }
        if trained && (m == 0 || !(epsilon > 0.0)) {
            return Err(err(0, "trained network needs centres and a positive epsilon"));
        }
        Ok(Self {
            centers,
            weights,
            epsilon,
            in_center,
            in_half_range,
            out_mean,
            out_std,
            a,
            training_residual,
            jitter_applied,
            trained,
        })
    }
}

/// Normalizers for endpoint error: position by lattice extent, heading by π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorScale {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TestReport {
    pub count: usize,
    pub worst: f64,
    pub mean: f64,
}

/// Normalized endpoint error of the network's spline for one goal.
pub fn endpoint_error(net: &RbfNetwork, goal: &Pose2D, scale: &ErrorScale, n_steps: usize) -> Result<f64, RbfError> {
    let p = net.infer(goal)?;
    if !(p.s > 0.0) {
        return Ok(f64::INFINITY);
    }
    let end = integrate_endpoint(&Pose2D::origin(), &p, n_steps);
    let ex = (end.x - goal.x) / scale.x.max(f64::MIN_POSITIVE);
    let ey = (end.y - goal.y) / scale.y.max(f64::MIN_POSITIVE);
    let et = angle_diff(end.theta, goal.theta) / std::f64::consts::PI;
    Ok((ex * ex + ey * ey + et * et).sqrt())
}

/// Worst-case and mean endpoint error over `goals`.
pub fn test_error(net: &RbfNetwork, goals: &[Pose2D], scale: &ErrorScale, opts: &BvpOptions) -> Result<TestReport, RbfError> {
    let errs = goals
        .iter()
        .map(|g| endpoint_error(net, g, scale, opts.n_steps.max(8)))
        .collect::<Result<Vec<f64>, _>>()?;
    if errs.is_empty() {
        return Ok(TestReport::default());
    }
    Ok(TestReport {
        count: errs.len(),
        worst: errs.iter().copied().fold(0.0, f64::max),
        mean: errs.iter().sum::<f64>() / errs.len() as f64,
    })
}

/// Uses the network in place of the solver, pinned to the caller's start curvature.
impl TrajectoryGenerator for RbfNetwork {
    fn generate(&self, x0: &VehicleState, goal: &Goal) -> Option<SplineParams> {
        let p = self.infer(&goal.pose).ok()?;
        Some(SplineParams { a: x0.kappa, ..p })
    }
}

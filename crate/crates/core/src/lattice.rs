//! State-lattice local planner built on cubic curvature splines.
//!
//! A spline is `(s, a, b, c, d)`: total arc length plus curvature knots at
//! arc fractions 0, 1/3, 2/3 and 1. Forward integration of the resulting
//! κ(s) gives the path. The two-point boundary value problem pins `a` to
//! the start curvature and `d` to the goal curvature, and solves for
//! `(b, c, s)` with damped Gauss–Newton on the endpoint pose residual.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, to_local_frame, ControlCommand, OrientedRect, Pose2D, VehicleState};
use crate::map::OccupancyGrid;
use crate::path::WaypointPath;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("arc length {s_query} outside [0, {s}]")]
    OutOfDomain { s_query: f64, s: f64 },
    #[error("integration needs at least 8 steps, got {0}")]
    TooFewSteps(usize),
    #[error("spline length must be positive, got {0}")]
    NonPositiveLength(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum BvpError {
    #[error("goal is {distance} m away, closer than the 0.05 m minimum")]
    DegenerateGoal { distance: f64 },
    #[error("no convergence after {iterations} iterations, best residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("solution peaks at curvature {max_kappa}, above the {kappa_max} limit")]
    CurvatureLimit { max_kappa: f64, kappa_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineParams {
    pub s: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl SplineParams {
    pub fn new(s: f64, a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { s, a, b, c, d }
    }

    /// Monomial coefficients of κ(s') = q0 + q1 s' + q2 s'^2 + q3 s'^3.
    pub fn coefficients(&self) -> [f64; 4] {
        let Self { s, a, b, c, d } = *self;
        [
            a,
            -(11.0 * a - 18.0 * b + 9.0 * c - 2.0 * d) / (2.0 * s),
            9.0 * (2.0 * a - 5.0 * b + 4.0 * c - d) / (2.0 * s * s),
            -9.0 * (a - 3.0 * b + 3.0 * c - d) / (2.0 * s * s * s),
        ]
    }

    pub fn kappa_at(&self, s_query: f64) -> Result<f64, LatticeError> {
        let slack = 1e-12 * self.s.abs().max(1.0);
        if !(s_query >= -slack && s_query <= self.s + slack) {
            return Err(LatticeError::OutOfDomain { s_query, s: self.s });
        }
        Ok(self.kappa_unchecked(s_query))
    }

    #[inline]
    pub fn kappa_unchecked(&self, s_query: f64) -> f64 {
        let [q0, q1, q2, q3] = self.coefficients();
        q0 + s_query * (q1 + s_query * (q2 + s_query * q3))
    }

    /// Exact max |κ| over `[0, s]` from the endpoints and the derivative's roots.
    pub fn max_abs_kappa(&self) -> f64 {
        let [_, q1, q2, q3] = self.coefficients();
        let mut best = self.a.abs().max(self.kappa_unchecked(self.s).abs());
        let mut consider = |t: f64| {
            if t > 0.0 && t < self.s {
                best = best.max(self.kappa_unchecked(t).abs());
            }
        };
        // κ'(t) = q1 + 2 q2 t + 3 q3 t²
        let (qa, qb, qc) = (3.0 * q3, 2.0 * q2, q1);
        if qa.abs() < 1e-300 {
            if qb.abs() > 1e-300 {
                consider(-qc / qb);
            }
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                consider((-qb - sq) / (2.0 * qa));
                consider((-qb + sq) / (2.0 * qa));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub s: f64,
    pub pose: Pose2D,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub params: SplineParams,
    pub start: VehicleState,
    pub samples: Vec<TrajectorySample>,
    pub endpoint: VehicleState,
}

/// ∫₀ᵗ κ for the monomial coefficients.
#[inline]
fn heading_integral(coef: &[f64; 4], t: f64) -> f64 {
    t * (coef[0] + t * (coef[1] / 2.0 + t * (coef[2] / 3.0 + t * coef[3] / 4.0)))
}

/// One RK4 step in arc length on (x, y, ψ)' = (cos ψ, sin ψ, κ(s)). ψ does
/// not depend on x or y, so its stage values are taken from the exact
/// integral of κ rather than from Euler predictions.
#[inline]
fn rk4_step(coef: &[f64; 4], s: f64, h: f64, state: (f64, f64, f64)) -> (f64, f64, f64) {
    let (x, y, psi) = state;
    let i0 = heading_integral(coef, s);
    let pm = psi + (heading_integral(coef, s + 0.5 * h) - i0);
    let p1 = psi + (heading_integral(coef, s + h) - i0);
    let (s0, c0) = psi.sin_cos();
    let (sm, cm) = pm.sin_cos();
    let (s1, c1) = p1.sin_cos();
    let w = h / 6.0;
    (x + w * (c0 + 4.0 * cm + c1), y + w * (s0 + 4.0 * sm + s1), p1)
}

/// Endpoint pose of the spline started at `start`, heading unwrapped.
pub fn integrate_endpoint(start: &Pose2D, p: &SplineParams, n_steps: usize) -> Pose2D {
    let coef = p.coefficients();
    let h = p.s / n_steps as f64;
    let mut st = (start.x, start.y, start.theta);
    for i in 0..n_steps {
        st = rk4_step(&coef, i as f64 * h, h, st);
    }
    Pose2D::new(st.0, st.1, st.2)
}

pub fn integrate_trajectory(x0: &VehicleState, p: &SplineParams, n_steps: usize) -> Result<Trajectory, LatticeError> {
    if n_steps < 8 {
        return Err(LatticeError::TooFewSteps(n_steps));
    }
    if !(p.s > 0.0) {
        return Err(LatticeError::NonPositiveLength(p.s));
    }
    let coef = p.coefficients();
    let h = p.s / n_steps as f64;
    let mut st = (x0.pose.x, x0.pose.y, x0.pose.theta);
    let mut samples = Vec::with_capacity(n_steps + 1);
    samples.push(TrajectorySample {
        s: 0.0,
        pose: x0.pose,
        kappa: p.a,
    });
    for i in 0..n_steps {
        st = rk4_step(&coef, i as f64 * h, h, st);
        let s = if i + 1 == n_steps { p.s } else { (i + 1) as f64 * h };
        samples.push(TrajectorySample {
            s,
            pose: Pose2D::new(st.0, st.1, st.2),
            kappa: p.kappa_unchecked(s),
        });
    }
    let last = samples[n_steps];
    Ok(Trajectory {
        params: *p,
        start: *x0,
        samples,
        endpoint: VehicleState {
            pose: last.pose,
            v: x0.v,
            kappa: p.d,
        },
    })
}

/// Goal pose (in the start frame) and goal curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub pose: Pose2D,
    pub kappa: f64,
}

impl Goal {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            pose: Pose2D::new(x, y, theta),
            kappa: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BvpOptions {
    pub max_iters: usize,
    pub n_steps: usize,
    pub pos_tol: f64,
    pub heading_tol: f64,
    pub fd_step: f64,
    pub max_halvings: usize,
    /// Reject converged splines whose |κ| exceeds this.
    pub kappa_max: Option<f64>,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            n_steps: 32,
            pos_tol: 1e-3,
            heading_tol: 1e-3,
            fd_step: 1e-4,
            max_halvings: 8,
            kappa_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpSolution {
    pub params: SplineParams,
    pub iterations: usize,
    /// Final (position error m, heading error rad).
    pub residual: (f64, f64),
}

struct Problem<'a> {
    a: f64,
    d: f64,
    goal: &'a Pose2D,
    n_steps: usize,
}

impl Problem<'_> {
    fn params(&self, q: &Vector3<f64>) -> SplineParams {
        SplineParams::new(q[2], self.a, q[0], q[1], self.d)
    }

    fn residual(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let end = integrate_endpoint(&Pose2D::origin(), &self.params(q), self.n_steps);
        Vector3::new(end.x - self.goal.x, end.y - self.goal.y, angle_diff(end.theta, self.goal.theta))
    }
}

/// Solves for a spline from `x0` (local origin, curvature `x0.kappa`) to a
/// goal expressed in `x0`'s frame.
pub fn solve_bvp(x0: &VehicleState, goal: &Goal, opts: &BvpOptions) -> Result<BvpSolution, BvpError> {
    let g = &goal.pose;
    let dist = g.x.hypot(g.y);
    if dist < 0.05 {
        return Err(BvpError::DegenerateGoal { distance: dist });
    }
    let prob = Problem {
        a: x0.kappa,
        d: goal.kappa,
        goal: g,
        n_steps: opts.n_steps.max(8),
    };
    let s_min = 0.5 * dist;
    let (a, d) = (prob.a, prob.d);
    let mut q = Vector3::new(
        a + (d - a) / 3.0,
        a + 2.0 * (d - a) / 3.0,
        dist * (1.0 + 0.2 * g.theta * g.theta),
    );
    let mut r = prob.residual(&q);
    let converged = |r: &Vector3<f64>| r[0].hypot(r[1]) < opts.pos_tol && r[2].abs() < opts.heading_tol;
    let clamp_s = |mut q: Vector3<f64>| {
        q[2] = q[2].max(s_min);
        q
    };

    for iter in 0..opts.max_iters {
        if converged(&r) {
            return finish(&prob, &q, r, iter, opts);
        }
        let h = opts.fd_step;
        let mut jac = Matrix3::zeros();
        for j in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += h;
            qm[j] -= h;
            jac.set_column(j, &((prob.residual(&qp) - prob.residual(&qm)) / (2.0 * h)));
        }
        let norm = r.norm();
        let gn = jac.lu().solve(&(-r)).filter(|dq| dq.iter().all(|v| v.is_finite()));
        let grad = {
            let g = jac.transpose() * r;
            let jg = jac * g;
            let denom = jg.norm_squared();
            (denom > 0.0).then(|| -g * (g.norm_squared() / denom))
        };
        let mut accepted = false;
        for dir in [gn, grad].into_iter().flatten() {
            let mut alpha = 1.0;
            for _ in 0..=opts.max_halvings {
                let cand = clamp_s(q + dir * alpha);
                let rc = prob.residual(&cand);
                if rc.norm() < norm {
                    q = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            return Err(BvpError::NoConvergence {
                iterations: iter + 1,
                residual: norm,
            });
        }
    }
    if converged(&r) {
        return finish(&prob, &q, r, opts.max_iters, opts);
    }
    Err(BvpError::NoConvergence {
        iterations: opts.max_iters,
        residual: r.norm(),
    })
}

fn finish(
    prob: &Problem<'_>,
    q: &Vector3<f64>,
    r: Vector3<f64>,
    iterations: usize,
    opts: &BvpOptions,
) -> Result<BvpSolution, BvpError> {
    let params = prob.params(q);
    if let Some(kappa_max) = opts.kappa_max {
        let max_kappa = params.max_abs_kappa();
        if max_kappa > kappa_max {
            return Err(BvpError::CurvatureLimit { max_kappa, kappa_max });
        }
    }
    Ok(BvpSolution {
        params,
        iterations,
        residual: (r[0].hypot(r[1]), r[2].abs()),
    })
}

/// Centerline plus the longitudinal/lateral offsets to sample goals at.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalRegion {
    pub centerline: WaypointPath,
    pub longitudinal: Vec<f64>,
    pub lateral: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledGoal {
    pub local: Pose2D,
    pub world: Pose2D,
    pub longitudinal: f64,
    pub lateral: f64,
}

/// Goals along the centerline ahead of the ego projection, displaced along
/// the left normal, returned in ego coordinates. Goals at or behind the
/// ego (local x ≤ 0) are dropped.
pub fn sample_goals(region: &GoalRegion, ego: &Pose2D) -> Vec<SampledGoal> {
    let base = region.centerline.project(ego.x, ego.y).arc;
    let mut out = Vec::new();
    for &lon in &region.longitudinal {
        let Some((cx, cy, heading, _)) = region.centerline.sample_at(base + lon) else {
            continue;
        };
        for &lat in &region.lateral {
            let world = Pose2D::new(cx - lat * heading.sin(), cy + lat * heading.cos(), heading);
            let local = to_local_frame(ego, &world);
            if local.x > 0.0 {
                out.push(SampledGoal {
                    local,
                    world,
                    longitudinal: lon,
                    lateral: lat,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub w_lat: f64,
    pub w_kappa: f64,
    pub w_len: f64,
    /// Lateral acceleration budget used to assign a speed.
    pub a_lat_max: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_lat: 2.0,
            w_kappa: 0.5,
            w_len: 0.1,
            a_lat_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryLimits {
    pub kappa_max: f64,
    pub v_max: f64,
    pub half_width: f64,
    pub margin: f64,
}

impl Default for TrajectoryLimits {
    fn default() -> Self {
        Self {
            kappa_max: 3.0,
            v_max: 7.0,
            half_width: 0.15,
            margin: 0.1,
        }
    }
}

impl TrajectoryLimits {
    pub fn inflation_radius(&self) -> f64 {
        self.half_width + self.margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Infeasibility {
    Obstacle { sample: usize },
    Peer { sample: usize },
    Curvature { max_kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Evaluation {
    Feasible {
        cost: f64,
        v_feasible: f64,
        max_kappa: f64,
        lateral_offset: f64,
    },
    Infeasible(Infeasibility),
}

#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub grid: &'a OccupancyGrid,
    pub peers: &'a [OrientedRect],
    pub centerline: &'a WaypointPath,
    pub weights: &'a CostWeights,
    pub limits: &'a TrajectoryLimits,
}

/// Collision and curvature screening, then cost and feasible speed.
pub fn evaluate_trajectory(traj: &Trajectory, ctx: &EvalContext<'_>) -> Evaluation {
    let max_kappa = traj.params.max_abs_kappa();
    if max_kappa > ctx.limits.kappa_max {
        return Evaluation::Infeasible(Infeasibility::Curvature { max_kappa });
    }
    let radius = ctx.limits.inflation_radius();
    for (i, smp) in traj.samples.iter().enumerate() {
        let (x, y) = (smp.pose.x, smp.pose.y);
        if ctx.grid.nearest_occupied_within(x, y, radius).is_some() {
            return Evaluation::Infeasible(Infeasibility::Obstacle { sample: i });
        }
        if ctx.peers.iter().any(|p| p.distance_to_point(x, y) < radius) {
            return Evaluation::Infeasible(Infeasibility::Peer { sample: i });
        }
    }
    let end = traj.endpoint.pose;
    let lateral_offset = ctx.centerline.lateral_offset(end.x, end.y);
    let w = ctx.weights;
    let cost = w.w_lat * lateral_offset.abs() + w.w_kappa * max_kappa + w.w_len * traj.params.s;
    let v_feasible = if max_kappa > 0.0 {
        (w.a_lat_max / max_kappa).sqrt().min(ctx.limits.v_max)
    } else {
        ctx.limits.v_max
    };
    Evaluation::Feasible {
        cost,
        v_feasible,
        max_kappa,
        lateral_offset,
    }
}

/// Source of spline parameters for a local goal: the exact solver or a
/// learned approximation of it.
pub trait TrajectoryGenerator: Sync {
    fn generate(&self, x0: &VehicleState, goal: &Goal) -> Option<SplineParams>;
}

/// The boundary-value solver as a generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct BvpGenerator(pub BvpOptions);

impl TrajectoryGenerator for BvpGenerator {
    fn generate(&self, x0: &VehicleState, goal: &Goal) -> Option<SplineParams> {
        solve_bvp(x0, goal, &self.0).ok().map(|s| s.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerOptions {
    pub weights: CostWeights,
    pub limits: TrajectoryLimits,
    /// Control period used to pick the commanded curvature.
    pub control_dt: f64,
    /// Maximum spacing between collision-check samples.
    pub sample_spacing: f64,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            limits: TrajectoryLimits::default(),
            control_dt: 0.05,
            sample_spacing: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub goal: SampledGoal,
    pub trajectory: Trajectory,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    /// Winning trajectory in world coordinates.
    pub trajectory: Option<Trajectory>,
    pub command: ControlCommand,
    pub goals: usize,
    pub solved: usize,
    pub feasible: usize,
}

/// Builds, screens and scores one candidate per sampled goal.
pub fn plan_candidates<G: TrajectoryGenerator + ?Sized>(
    x0: &VehicleState,
    region: &GoalRegion,
    grid: &OccupancyGrid,
    peers: &[OrientedRect],
    generator: &G,
    opts: &PlannerOptions,
) -> (usize, Vec<Candidate>) {
    let goals = sample_goals(region, &x0.pose);
    let ctx = EvalContext {
        grid,
        peers,
        centerline: &region.centerline,
        weights: &opts.weights,
        limits: &opts.limits,
    };
    // per-goal work is independent; collect keeps goal order
    let candidates: Vec<Candidate> = goals
        .par_iter()
        .filter_map(|g| {
            let local_goal = Goal {
                pose: g.local,
                kappa: 0.0,
            };
            let params = generator.generate(x0, &local_goal)?;
            if !(params.s > 0.0) {
                return None;
            }
            let n = ((params.s / opts.sample_spacing).ceil() as usize).max(16);
            let trajectory = integrate_trajectory(x0, &params, n).ok()?;
            let evaluation = evaluate_trajectory(&trajectory, &ctx);
            Some(Candidate {
                goal: *g,
                trajectory,
                evaluation,
            })
        })
        .collect();
    (goals.len(), candidates)
}

/// One planning cycle: sample, solve, evaluate, pick the cheapest feasible
/// trajectory. Stops the vehicle when nothing is feasible.
pub fn plan_step<G: TrajectoryGenerator + ?Sized>(
    x0: &VehicleState,
    region: &GoalRegion,
    grid: &OccupancyGrid,
    peers: &[OrientedRect],
    generator: &G,
    opts: &PlannerOptions,
) -> PlanOutput {
    let (goals, candidates) = plan_candidates(x0, region, grid, peers, generator, opts);
    let solved = candidates.len();
    let mut best: Option<(&Candidate, f64, f64, f64)> = None;
    let mut feasible = 0;
    for cand in &candidates {
        let Evaluation::Feasible {
            cost,
            v_feasible,
            lateral_offset,
            ..
        } = cand.evaluation
        else {
            continue;
        };
        feasible += 1;
        let better = match best {
            None => true,
            Some((b, bc, _, bl)) => cost
                .total_cmp(&bc)
                .then(lateral_offset.abs().total_cmp(&bl.abs()))
                .then(cand.trajectory.params.s.total_cmp(&b.trajectory.params.s))
                .is_lt(),
        };
        if better {
            best = Some((cand, cost, v_feasible, lateral_offset));
        }
    }
    match best {
        Some((cand, _, v_feasible, _)) => {
            let p = &cand.trajectory.params;
            let ahead = (x0.v * opts.control_dt).clamp(0.0, p.s);
            PlanOutput {
                trajectory: Some(cand.trajectory.clone()),
                command: ControlCommand::new(v_feasible, p.kappa_unchecked(ahead))
                    .clamped(opts.limits.v_max, opts.limits.kappa_max),
                goals,
                solved,
                feasible,
            }
        }
        None => PlanOutput {
            trajectory: None,
            command: ControlCommand::stop(),
            goals,
            solved,
            feasible,
        },
    }
}

//! Deterministic multi-vehicle world on a curvature-kinematic model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{to_local_frame, wrap_angle, ControlCommand, OrientedRect, Pose2D, VehicleState};
use crate::map::OccupancyGrid;
use crate::raycast::{simulate_scan, LaserScan, Overlay, ScanConfig};

pub type VehicleId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("unknown vehicle id {0}")]
    UnknownVehicleId(VehicleId),
    #[error("vehicle id {0} already exists")]
    DuplicateId(VehicleId),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Defaults are plausible 1/10-scale values, not measured ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub kappa_max: f64,
    /// Curvature slew limit, 1/(m·s).
    pub kappa_rate_max: f64,
    pub accel_max: f64,
    pub decel_max: f64,
    pub v_max: f64,
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.325,
            kappa_max: 3.0,
            kappa_rate_max: 10.0,
            accel_max: 4.0,
            decel_max: 8.0,
            v_max: 7.0,
            length: 0.5,
            width: 0.3,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("wheelbase", self.wheelbase),
            ("kappa_max", self.kappa_max),
            ("kappa_rate_max", self.kappa_rate_max),
            ("accel_max", self.accel_max),
            ("decel_max", self.decel_max),
            ("v_max", self.v_max),
            ("length", self.length),
            ("width", self.width),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidParams(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn footprint(&self, pose: Pose2D) -> OrientedRect {
        OrientedRect::new(pose, self.length, self.width)
    }

    /// Steering angle realizing curvature `kappa` on a bicycle model.
    pub fn steering_angle(&self, kappa: f64) -> f64 {
        (self.wheelbase * kappa).atan()
    }
}

/// Zero sigma means exact.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub range_sigma: f64,
    pub odom_pos_sigma: f64,
    pub odom_theta_sigma: f64,
    pub odom_v_sigma: f64,
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map_or(0.0, |n| n.sample(rng))
    } else {
        0.0
    }
}

fn slew(current: f64, target: f64, up: f64, down: f64) -> f64 {
    current + (target - current).clamp(-down, up)
}

/// Advances one vehicle by `dt`: curvature and speed slew toward the
/// command within limits, then the pose integrates with RK4 at the new
/// speed and curvature.
pub fn step_vehicle(
    state: &VehicleState,
    params: &VehicleParams,
    cmd: &ControlCommand,
    dt: f64,
) -> Result<VehicleState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositiveDt(dt));
    }
    let dk = params.kappa_rate_max * dt;
    let kappa = slew(state.kappa, cmd.kappa.clamp(-params.kappa_max, params.kappa_max), dk, dk)
        .clamp(-params.kappa_max, params.kappa_max);
    let v = slew(
        state.v,
        cmd.speed.clamp(0.0, params.v_max),
        params.accel_max * dt,
        params.decel_max * dt,
    )
    .clamp(0.0, params.v_max);

    let pose = integrate_arc(&state.pose, v, kappa, dt);
    Ok(VehicleState { pose, v, kappa })
}

/// RK4 on ẋ = v cosΨ, ẏ = v sinΨ, Ψ̇ = vκ with v, κ held constant.
pub fn integrate_arc(pose: &Pose2D, v: f64, kappa: f64, dt: f64) -> Pose2D {
    let f = |th: f64| (v * th.cos(), v * th.sin(), v * kappa);
    let th0 = pose.theta;
    let k1 = f(th0);
    let k2 = f(th0 + 0.5 * dt * k1.2);
    let k3 = f(th0 + 0.5 * dt * k2.2);
    let k4 = f(th0 + dt * k3.2);
    let w = dt / 6.0;
    Pose2D::new(
        pose.x + w * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        pose.y + w * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        th0 + w * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub params: VehicleParams,
    pub last_cmd: ControlCommand,
    pub collided: bool,
}

impl SimVehicle {
    pub fn footprint(&self) -> OrientedRect {
        self.params.footprint(self.state.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CollisionKind {
    Wall { vehicle: VehicleId },
    Vehicle { a: VehicleId, b: VehicleId },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    pub step: u64,
    #[serde(flatten)]
    pub kind: CollisionKind,
}

impl CollisionEvent {
    pub fn involves(&self, id: VehicleId) -> bool {
        match self.kind {
            CollisionKind::Wall { vehicle } => vehicle == id,
            CollisionKind::Vehicle { a, b } => a == id || b == id,
        }
    }
}

/// Number of occupied (or off-grid) cells overlapped by a footprint.
pub fn footprint_overlap_count(grid: &OccupancyGrid, rect: &OrientedRect) -> usize {
    let res = grid.resolution();
    let local = to_local_frame(&grid.origin(), &rect.pose);
    let cell_rect = OrientedRect::new(
        Pose2D::new(local.x / res, local.y / res, local.theta),
        rect.length / res,
        rect.width / res,
    );
    let (x0, y0, x1, y1) = cell_rect.bounding_box();
    let mut count = 0;
    for r in (y0.floor() as i64)..=(y1.floor() as i64) {
        for c in (x0.floor() as i64)..=(x1.floor() as i64) {
            if grid.is_occupied(c, r)
                && cell_rect.intersects_aabb(c as f64, r as f64, c as f64 + 1.0, r as f64 + 1.0)
            {
                count += 1;
            }
        }
    }
    count
}

/// Marks every cell whose centre lies inside `rect`.
pub fn rasterize_footprint(overlay: &mut Overlay<'_>, grid: &OccupancyGrid, rect: &OrientedRect) {
    let (x0, y0, x1, y1) = rect.bounding_box();
    let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)].map(|(x, y)| grid.world_to_grid_f(x, y));
    let cmin = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let rmin = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let cmax = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).ceil();
    let rmax = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).ceil();
    if cmax < 0.0 || rmax < 0.0 {
        return;
    }
    let cmax = (cmax as usize).min(grid.width() - 1);
    let rmax = (rmax as usize).min(grid.height() - 1);
    for r in rmin..=rmax {
        for c in cmin..=cmax {
            let (x, y) = grid.grid_to_world(c, r);
            if rect.contains(x, y) {
                overlay.mark(c, r);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    grid: Arc<OccupancyGrid>,
    vehicles: Vec<SimVehicle>,
    time: f64,
    steps: u64,
    /// (time, steps, dt) at the last change of step size; time is
    /// recomputed from it so constant-dt runs do not accumulate rounding
    anchor: (f64, u64, f64),
    seed: u64,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(grid: Arc<OccupancyGrid>, seed: u64) -> Self {
        Self {
            grid,
            vehicles: Vec::new(),
            time: 0.0,
            steps: 0,
            anchor: (0.0, 0, 0.0),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add_vehicle(&mut self, id: VehicleId, state: VehicleState, params: VehicleParams) -> Result<(), SimError> {
        params.validate()?;
        match self.vehicles.binary_search_by_key(&id, |v| v.id) {
            Ok(_) => Err(SimError::DuplicateId(id)),
            Err(pos) => {
                self.vehicles.insert(
                    pos,
                    SimVehicle {
                        id,
                        state,
                        params,
                        last_cmd: ControlCommand::stop(),
                        collided: false,
                    },
                );
                Ok(())
            }
        }
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> Arc<OccupancyGrid> {
        Arc::clone(&self.grid)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Vehicles in ascending id order.
    pub fn vehicles(&self) -> &[SimVehicle] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: VehicleId) -> Result<&SimVehicle, SimError> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .map(|i| &self.vehicles[i])
            .map_err(|_| SimError::UnknownVehicleId(id))
    }

    pub fn vehicle_mut(&mut self, id: VehicleId) -> Result<&mut SimVehicle, SimError> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .map(|i| &mut self.vehicles[i])
            .map_err(|_| SimError::UnknownVehicleId(id))
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Steps every vehicle (ascending id) and reports new collisions.
    /// Vehicles without a command hold their previous one; collided
    /// vehicles stay frozen.
    pub fn step(
        &mut self,
        commands: &BTreeMap<VehicleId, ControlCommand>,
        dt: f64,
    ) -> Result<Vec<CollisionEvent>, SimError> {
        if !(dt > 0.0) {
            return Err(SimError::NonPositiveDt(dt));
        }
        if let Some(id) = commands.keys().find(|id| self.vehicle(**id).is_err()) {
            return Err(SimError::UnknownVehicleId(*id));
        }
        for v in &mut self.vehicles {
            if let Some(cmd) = commands.get(&v.id) {
                v.last_cmd = *cmd;
            }
            if v.collided {
                v.state.v = 0.0;
                continue;
            }
            v.state = step_vehicle(&v.state, &v.params, &v.last_cmd, dt)?;
        }
        if dt != self.anchor.2 {
            self.anchor = (self.time, self.steps, dt);
        }
        self.steps += 1;
        self.time = self.anchor.0 + (self.steps - self.anchor.1) as f64 * dt;

        let mut events = Vec::new();
        let mut hit = vec![false; self.vehicles.len()];
        for (i, v) in self.vehicles.iter().enumerate() {
            if !v.collided && footprint_overlap_count(&self.grid, &v.footprint()) > 0 {
                hit[i] = true;
                events.push(CollisionEvent {
                    time: self.time,
                    step: self.steps,
                    kind: CollisionKind::Wall { vehicle: v.id },
                });
            }
        }
        for i in 0..self.vehicles.len() {
            for j in (i + 1)..self.vehicles.len() {
                let (a, b) = (&self.vehicles[i], &self.vehicles[j]);
                if a.collided && b.collided {
                    continue;
                }
                if a.footprint().intersects(&b.footprint()) {
                    hit[i] = true;
                    hit[j] = true;
                    events.push(CollisionEvent {
                        time: self.time,
                        step: self.steps,
                        kind: CollisionKind::Vehicle { a: a.id, b: b.id },
                    });
                }
            }
        }
        for (v, h) in self.vehicles.iter_mut().zip(hit) {
            if h {
                v.collided = true;
                v.state.v = 0.0;
            }
        }
        Ok(events)
    }

    /// Scan from one vehicle; every other vehicle is rasterized into the map.
    pub fn sense<R: Rng + ?Sized>(
        &self,
        id: VehicleId,
        cfg: &ScanConfig,
        noise: &NoiseConfig,
        rng: &mut R,
    ) -> Result<LaserScan, SimError> {
        let ego = self.vehicle(id)?;
        let mut overlay = Overlay::new(&self.grid);
        for other in self.vehicles.iter().filter(|v| v.id != id) {
            rasterize_footprint(&mut overlay, &self.grid, &other.footprint());
        }
        let mut scan = simulate_scan(&overlay, &ego.state.pose, cfg);
        if noise.range_sigma > 0.0 {
            for r in &mut scan.ranges {
                *r = (*r + gaussian(rng, noise.range_sigma)).clamp(0.0, cfg.range_max);
            }
        }
        Ok(scan)
    }
}

/// Body-frame motion between two states, as wheel odometry would report it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OdomDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    pub v: f64,
}

pub fn odometry<R: Rng + ?Sized>(
    prev: &VehicleState,
    new: &VehicleState,
    noise: &NoiseConfig,
    rng: &mut R,
) -> OdomDelta {
    let d = to_local_frame(&prev.pose, &new.pose);
    OdomDelta {
        dx: d.x + gaussian(rng, noise.odom_pos_sigma),
        dy: d.y + gaussian(rng, noise.odom_pos_sigma),
        dtheta: wrap_angle(d.theta + gaussian(rng, noise.odom_theta_sigma)),
        v: new.v + gaussian(rng, noise.odom_v_sigma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn free_params() -> VehicleParams {
        VehicleParams {
            kappa_rate_max: 1e9,
            accel_max: 1e9,
            decel_max: 1e9,
            kappa_max: 10.0,
            ..VehicleParams::default()
        }
    }

    #[test]
    fn straight_line() {
        let s = VehicleState::new(Pose2D::origin(), 1.0, 0.0);
        let n = step_vehicle(&s, &free_params(), &ControlCommand::new(1.0, 0.0), 1.0).unwrap();
        assert!((n.pose.x - 1.0).abs() < 1e-15);
        assert_eq!(n.pose.y, 0.0);
        assert_eq!(n.pose.theta, 0.0);
    }

    #[test]
    fn half_circle_closed_form() {
        let p = free_params();
        let cmd = ControlCommand::new(1.0, 1.0);
        let mut s = VehicleState::new(Pose2D::origin(), 1.0, 1.0);
        let dt = 0.01;
        let full = (PI / dt).floor() as usize;
        for _ in 0..full {
            s = step_vehicle(&s, &p, &cmd, dt).unwrap();
        }
        s = step_vehicle(&s, &p, &cmd, PI - full as f64 * dt).unwrap();
        assert!(s.pose.x.abs() < 1e-6, "{:?}", s.pose);
        assert!((s.pose.y - 2.0).abs() < 1e-6);
        assert!((s.pose.theta.abs() - PI).abs() < 1e-6);
    }

    #[test]
    fn stop_from_rest_is_still() {
        let s = VehicleState::new(Pose2D::new(1.0, 2.0, 0.3), 0.0, 0.2);
        let n = step_vehicle(&s, &VehicleParams::default(), &ControlCommand::new(0.0, 0.2), 0.01).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn rejects_bad_dt() {
        let s = VehicleState::default();
        let cmd = ControlCommand::default();
        assert_eq!(
            step_vehicle(&s, &VehicleParams::default(), &cmd, 0.0),
            Err(SimError::NonPositiveDt(0.0))
        );
    }

    #[test]
    fn slew_limits() {
        let p = VehicleParams::default();
        let s = VehicleState::default();
        let n = step_vehicle(&s, &p, &ControlCommand::new(100.0, 100.0), 0.01).unwrap();
        assert!((n.kappa - p.kappa_rate_max * 0.01).abs() < 1e-12);
        assert!((n.v - p.accel_max * 0.01).abs() < 1e-12);
    }

    #[test]
    fn unknown_command_id() {
        let grid = Arc::new(OccupancyGrid::new(10, 10, 0.1, Pose2D::origin(), 0.5).unwrap());
        let mut w = World::new(grid, 1);
        w.add_vehicle(1, VehicleState::at_rest(Pose2D::new(0.5, 0.5, 0.0)), VehicleParams::default())
            .unwrap();
        assert_eq!(
            w.add_vehicle(1, VehicleState::default(), VehicleParams::default()),
            Err(SimError::DuplicateId(1))
        );
        let cmds = BTreeMap::from([(7, ControlCommand::stop())]);
        assert_eq!(w.step(&cmds, 0.01), Err(SimError::UnknownVehicleId(7)));
    }

    #[test]
    fn odometry_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = VehicleState::new(Pose2D::new(1.0, 1.0, 0.7), 2.0, 0.0);
        let d = odometry(&a, &a, &NoiseConfig::default(), &mut rng);
        assert_eq!(d, OdomDelta { dx: 0.0, dy: 0.0, dtheta: 0.0, v: 2.0 });
        let b = VehicleState::new(a.pose.compose(&Pose2D::new(1.0, 0.0, 0.0)), 2.0, 0.0);
        let d = odometry(&a, &b, &NoiseConfig::default(), &mut rng);
        assert!((d.dx - 1.0).abs() < 1e-12 && d.dy.abs() < 1e-12 && d.dtheta.abs() < 1e-12);
    }

    #[test]
    fn overlap_count_near_wall() {
        let mut g = OccupancyGrid::new(40, 40, 0.05, Pose2D::origin(), 0.5).unwrap();
        g.fill_where(|x, _| x > 1.5);
        let p = VehicleParams::default();
        assert_eq!(footprint_overlap_count(&g, &p.footprint(Pose2D::new(1.0, 1.0, 0.0))), 0);
        assert!(footprint_overlap_count(&g, &p.footprint(Pose2D::new(1.3, 1.0, 0.0))) > 0);
        // off-grid counts as occupied
        assert!(footprint_overlap_count(&g, &p.footprint(Pose2D::new(0.1, 1.0, 0.0))) > 0);
    }
}

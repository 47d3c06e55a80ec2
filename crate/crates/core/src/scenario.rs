//! Scenario configuration and the closed-loop episode runner.
//!
//! A scenario is one JSON document. Relative paths inside it (map,
//! waypoints, network files) resolve against the document's directory.
//! Every random draw descends from `seed`; V2V timestamps are simulation
//! time, so a rerun reproduces the logs byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ftg::{ftg_command, FtgConfig};
use crate::geom::{ControlCommand, OrientedRect, Pose2D, VehicleState};
use crate::lattice::{plan_step, BvpGenerator, BvpOptions, GoalRegion, PlannerOptions, TrajectoryGenerator};
use crate::localize::{InitMode, LocalizeError, Localizer, LocalizerConfig};
use crate::map::{load_map_from_meta, MapError, OccupancyGrid};
use crate::monitor::{apply_failsafe, check, MonitorKind, MonitorSpec, Violation};
use crate::path::{load_waypoints, PathError, WaypointPath};
use crate::pursuit::{find_lookahead_point, PurePursuit, PursuitConfig};
use crate::raycast::{LaserScan, ScanConfig};
use crate::rbf::{build_training_set, train_rbf, GoalLattice, RbfError, RbfNetwork, RbfOptions};
use crate::sim::{odometry, CollisionEvent, NoiseConfig, SimError, VehicleId, VehicleParams, World};
use crate::tracks::LapLine;
use crate::v2v::{
    visible_objects, ChannelConfig, ConflictZone, Intent, RoundaboutConfig, RoundaboutController, SimBus, V2vClient,
    V2vEndpoint, V2vError, V2vServer,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const EPISODE_CSV: &str = "episode.csv";
pub const VIOLATIONS_CSV: &str = "violations.csv";
pub const LOCALIZATION_CSV: &str = "localization.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("cannot load map {path}: {source}")]
    MapLoad {
        path: PathBuf,
        #[source]
        source: MapError,
    },
    #[error("cannot load waypoints {path}: {source}")]
    Waypoints {
        path: PathBuf,
        #[source]
        source: PathError,
    },
    #[error("cannot load network {path}: {source}")]
    Network {
        path: PathBuf,
        #[source]
        source: RbfError,
    },
    #[error(transparent)]
    Rbf(#[from] RbfError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    V2v(#[from] V2vError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn config_err(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Config {
        path: path.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_dt() -> f64 {
    0.01
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Map metadata file; it names its PGM image.
    pub map: PathBuf,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lap_line: Option<LapLine>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub monitors: Vec<MonitorSpec>,
    #[serde(default)]
    pub v2v: V2vSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zone: Option<ConflictZone>,
    pub vehicles: Vec<VehicleConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// In-process bus with injectable loss and latency.
    #[default]
    Sim,
    /// Loopback TCP server plus one client per vehicle.
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct V2vSettings {
    pub transport: Transport,
    /// TCP port; 0 picks a free one.
    pub port: u16,
    pub channel: ChannelConfig,
    /// Range of the line-of-sight object list.
    pub range: f64,
}

impl Default for V2vSettings {
    fn default() -> Self {
        Self {
            transport: Transport::Sim,
            port: 0,
            channel: ChannelConfig::default(),
            range: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: VehicleId,
    pub start: Pose2D,
    /// Seeded backward shift of the start along its heading, drawn
    /// uniformly from [0, start_jitter).
    #[serde(default)]
    pub start_jitter: f64,
    #[serde(default)]
    pub v0: f64,
    #[serde(default)]
    pub params: VehicleParams,
    /// Planner period in simulation steps; commands are held in between.
    #[serde(default = "one")]
    pub plan_every: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localize: Option<LocalizeSettings>,
    pub planner: PlannerConfig,
}

fn uniform() -> InitMode {
    InitMode::UniformFree
}

fn ten() -> u32 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeSettings {
    #[serde(default)]
    pub config: LocalizerConfig,
    #[serde(default = "uniform")]
    pub init: InitMode,
    /// Sensor update period in simulation steps.
    #[serde(default = "ten")]
    pub update_every: u32,
    /// Feed the estimate to the planner instead of the true pose.
    #[serde(default)]
    pub drive_on_estimate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// Arc-length offsets ahead of the ego projection.
    pub longitudinal: Vec<f64>,
    /// Offsets along the left normal of the centerline.
    pub lateral: Vec<f64>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            longitudinal: vec![1.5, 2.0, 2.5],
            lateral: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfTraining {
    pub lattice: GoalLattice,
    pub options: RbfOptions,
    pub bvp: BvpOptions,
}

fn one_meter() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlannerConfig {
    Ftg {
        #[serde(default)]
        config: FtgConfig,
        /// Optional route supplying the goal heading.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        waypoints: Option<PathBuf>,
        #[serde(default = "one_meter")]
        goal_lookahead: f64,
    },
    Pursuit {
        waypoints: PathBuf,
        #[serde(default = "yes")]
        closed: bool,
        #[serde(default)]
        config: PursuitConfig,
    },
    Lattice {
        waypoints: PathBuf,
        #[serde(default = "yes")]
        closed: bool,
        #[serde(default)]
        region: RegionConfig,
        #[serde(default)]
        bvp: BvpOptions,
        #[serde(default)]
        options: PlannerOptions,
    },
    Rbf {
        waypoints: PathBuf,
        #[serde(default = "yes")]
        closed: bool,
        #[serde(default)]
        region: RegionConfig,
        /// Trained network file; trained from `training` at start-up when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        network: Option<PathBuf>,
        #[serde(default)]
        training: RbfTraining,
        #[serde(default)]
        options: PlannerOptions,
    },
    Roundabout {
        waypoints: PathBuf,
        #[serde(default)]
        pursuit: PursuitConfig,
        #[serde(default)]
        config: RoundaboutConfig,
    },
    /// Stands still; used for localization runs.
    Hold,
}

impl PlannerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerConfig::Ftg { .. } => "ftg",
            PlannerConfig::Pursuit { .. } => "pursuit",
            PlannerConfig::Lattice { .. } => "lattice",
            PlannerConfig::Rbf { .. } => "rbf",
            PlannerConfig::Roundabout { .. } => "roundabout",
            PlannerConfig::Hold => "hold",
        }
    }
}

impl ScenarioConfig {
    /// Parses a config document; unknown keys are rejected with their path.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().to_string())
        })?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn with_overrides(mut self, seed: Option<u64>, duration: Option<f64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = duration {
            self.duration = d;
        }
        self
    }

    /// Structural checks that do not need the map.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(config_err("duration", format!("must be positive, got {}", self.duration)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config_err("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.vehicles.is_empty() {
            return Err(config_err("vehicles", "at least one vehicle is required"));
        }
        let n = &self.noise;
        for (name, v) in [
            ("range_sigma", n.range_sigma),
            ("odom_pos_sigma", n.odom_pos_sigma),
            ("odom_theta_sigma", n.odom_theta_sigma),
            ("odom_v_sigma", n.odom_v_sigma),
        ] {
            if !(v >= 0.0) {
                return Err(config_err(format!("noise.{name}"), "must be non-negative"));
            }
        }
        for (i, m) in self.monitors.iter().enumerate() {
            m.validate().map_err(|e| config_err(format!("monitors[{i}]"), e))?;
        }
        if let Some(z) = &self.zone {
            z.validate().map_err(|e| config_err("zone", e))?;
        }
        let c = &self.v2v.channel;
        if !(0.0..=1.0).contains(&c.loss) {
            return Err(config_err("v2v.channel.loss", "must lie in [0, 1]"));
        }
        if !(c.latency >= 0.0) || !(c.staleness_window > 0.0) {
            return Err(config_err("v2v.channel", "latency must be non-negative and staleness_window positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let at = |f: &str| format!("vehicles[{i}].{f}");
            if !seen.insert(v.id) {
                return Err(config_err(at("id"), format!("duplicate vehicle id {}", v.id)));
            }
            v.params.validate().map_err(|e| config_err(at("params"), e.to_string()))?;
            if v.plan_every == 0 {
                return Err(config_err(at("plan_every"), "must be at least 1"));
            }
            if !(v.start_jitter >= 0.0 && v.start_jitter.is_finite()) {
                return Err(config_err(at("start_jitter"), "must be non-negative"));
            }
            if !(v.v0 >= 0.0 && v.v0 <= v.params.v_max) {
                return Err(config_err(at("v0"), "must lie in [0, v_max]"));
            }
            if let Some(l) = &v.localize {
                if l.update_every == 0 {
                    return Err(config_err(at("localize.update_every"), "must be at least 1"));
                }
                if l.config.particles == 0 || l.config.subsample_k == 0 {
                    return Err(config_err(at("localize.config"), "particles and subsample_k must be at least 1"));
                }
            }
            match &v.planner {
                PlannerConfig::Ftg { config, .. } => {
                    config.validate().map_err(|e| config_err(at("planner.config"), e.to_string()))?
                }
                PlannerConfig::Lattice { region, .. } | PlannerConfig::Rbf { region, .. } => {
                    if region.longitudinal.is_empty() || region.lateral.is_empty() {
                        return Err(config_err(at("planner.region"), "needs at least one offset on each axis"));
                    }
                }
                PlannerConfig::Roundabout { .. } if self.zone.is_none() => {
                    return Err(config_err("zone", "roundabout planners need a conflict zone"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-vehicle outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleSummary {
    pub id: VehicleId,
    pub planner: String,
    pub laps: u32,
    pub lap_times: Vec<f64>,
    pub collided: bool,
    pub distance: f64,
    pub final_pose: Pose2D,
    pub max_speed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_scan_range: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zone: Option<ZoneVisit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationSummary {
    pub updates: u32,
    pub final_error: f64,
    /// First update whose estimate was within two grid cells of the truth.
    pub converged_after: Option<u32>,
    pub injected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneVisit {
    pub entered_at: Option<f64>,
    pub exited_at: Option<f64>,
    /// Steps spent stopped at the line while told to yield.
    pub held_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZoneSummary {
    /// Largest ground-truth occupant count seen at any step.
    pub max_occupancy: usize,
    /// Largest number of vehicles broadcasting INSIDE at once.
    pub max_inside_intents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct V2vSummary {
    pub transport: Transport,
    pub published: u64,
    pub dropped: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogPaths {
    pub episode: String,
    pub violations: String,
    pub localization: String,
    pub trajectories: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub steps: u64,
    pub laps: u32,
    pub vehicles: Vec<VehicleSummary>,
    pub collisions: Vec<CollisionEvent>,
    pub violations: usize,
    pub violations_by_monitor: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zone: Option<ZoneSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v2v: Option<V2vSummary>,
    pub logs: LogPaths,
    #[serde(skip)]
    pub log_dir: PathBuf,
}

impl ExitSummary {
    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleSummary> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

enum Planner {
    Ftg {
        config: FtgConfig,
        route: Option<WaypointPath>,
        lookahead: f64,
    },
    Pursuit(PurePursuit),
    Lattice {
        region: GoalRegion,
        generator: Box<dyn TrajectoryGenerator>,
        options: PlannerOptions,
    },
    Roundabout(RoundaboutController),
    Hold,
}

struct Agent {
    id: VehicleId,
    plan_every: u64,
    planner: Planner,
    planner_name: &'static str,
    localizer: Option<(Localizer, LocalizeSettings)>,
    /// Odometry accumulated since the last localizer prediction.
    odom_acc: Pose2D,
    estimate: Option<Pose2D>,
    loc_updates: u32,
    loc_converged: Option<u32>,
    cmd: ControlCommand,
    lap_net: i64,
    lap_best: i64,
    lap_times: Vec<f64>,
    last_lap_time: f64,
    distance: f64,
    max_speed: f64,
    min_scan: Option<f64>,
    safe: bool,
    holding: bool,
    visit: ZoneVisit,
}

impl Agent {
    fn needs_scan(&self, step: u64, clearance_monitor: bool) -> bool {
        let plan = matches!(self.planner, Planner::Ftg { .. }) && step % self.plan_every == 0;
        let loc = self
            .localizer
            .as_ref()
            .is_some_and(|(_, s)| step % s.update_every as u64 == 0);
        plan || loc || clearance_monitor
    }
}

enum Bus {
    Sim(SimBus),
    Tcp {
        // kept alive for the episode
        _server: V2vServer,
        clients: BTreeMap<VehicleId, V2vClient>,
    },
}

impl Bus {
    fn endpoint(&mut self, id: VehicleId) -> &mut dyn V2vEndpoint {
        match self {
            Bus::Sim(bus) => bus,
            Bus::Tcp { clients, .. } => clients.get_mut(&id).expect("client per roundabout vehicle"),
        }
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Logs {
    episode: BufWriter<File>,
    violations: BufWriter<File>,
    localization: BufWriter<File>,
    trajectories: BufWriter<File>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self, ScenarioError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>, ScenarioError> {
            let p = dir.join(name);
            let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
            writeln!(w, "{header}").map_err(io_err(&p))?;
            Ok(w)
        };
        Ok(Self {
            episode: open(EPISODE_CSV, "time,id,x,y,theta,v,kappa,cmd_speed,cmd_kappa,collision_flag")?,
            violations: open(VIOLATIONS_CSV, "time,monitor,vehicle,value")?,
            localization: open(LOCALIZATION_CSV, "time,id,est_x,est_y,est_theta,error")?,
            trajectories: open(TRAJECTORIES_CSV, "time,id,s,x,y,theta,kappa")?,
        })
    }

    fn flush(&mut self, dir: &Path) -> Result<(), ScenarioError> {
        for w in [
            &mut self.episode,
            &mut self.violations,
            &mut self.localization,
            &mut self.trajectories,
        ] {
            w.flush().map_err(io_err(dir))?;
        }
        Ok(())
    }
}

/// A validated scenario with its map and planners loaded.
pub struct Scenario {
    config: ScenarioConfig,
    world: World,
    agents: Vec<Agent>,
    bus: Option<Bus>,
}

fn load_route(cfg: &ScenarioConfig, p: &Path, closed: bool, speed: f64) -> Result<WaypointPath, ScenarioError> {
    let full = cfg.resolve(p);
    load_waypoints(&full, closed, speed).map_err(|source| ScenarioError::Waypoints { path: full, source })
}

fn build_planner(
    cfg: &ScenarioConfig,
    v: &VehicleConfig,
    roster: &[VehicleId],
) -> Result<Planner, ScenarioError> {
    let region = |route: WaypointPath, r: &RegionConfig| GoalRegion {
        centerline: route,
        longitudinal: r.longitudinal.clone(),
        lateral: r.lateral.clone(),
    };
    Ok(match &v.planner {
        PlannerConfig::Ftg {
            config,
            waypoints,
            goal_lookahead,
        } => Planner::Ftg {
            config: *config,
            route: match waypoints {
                Some(p) => Some(load_route(cfg, p, true, config.speed_nominal)?),
                None => None,
            },
            lookahead: *goal_lookahead,
        },
        PlannerConfig::Pursuit {
            waypoints,
            closed,
            config,
        } => {
            let route = load_route(cfg, waypoints, *closed, config.default_speed)?;
            Planner::Pursuit(
                PurePursuit::new(route, *config).map_err(|e| config_err("planner.config", e.to_string()))?,
            )
        }
        PlannerConfig::Lattice {
            waypoints,
            closed,
            region: r,
            bvp,
            options,
        } => Planner::Lattice {
            region: region(load_route(cfg, waypoints, *closed, options.limits.v_max)?, r),
            generator: Box::new(BvpGenerator(*bvp)),
            options: *options,
        },
        PlannerConfig::Rbf {
            waypoints,
            closed,
            region: r,
            network,
            training,
            options,
        } => {
            let net = match network {
                Some(p) => {
                    let full = cfg.resolve(p);
                    let text = std::fs::read_to_string(&full).map_err(io_err(&full))?;
                    RbfNetwork::from_text(&text).map_err(|source| ScenarioError::Network { path: full, source })?
                }
                None => {
                    let set = build_training_set(&VehicleState::default(), &training.lattice.points(), &training.bvp)?;
                    train_rbf(&set, &training.options)?
                }
            };
            Planner::Lattice {
                region: region(load_route(cfg, waypoints, *closed, options.limits.v_max)?, r),
                generator: Box::new(net),
                options: *options,
            }
        }
        PlannerConfig::Roundabout {
            waypoints,
            pursuit,
            config,
        } => {
            let route = load_route(cfg, waypoints, false, pursuit.default_speed)?;
            let tracker =
                PurePursuit::new(route, *pursuit).map_err(|e| config_err("planner.pursuit", e.to_string()))?;
            let zone = cfg.zone.expect("validated");
            Planner::Roundabout(RoundaboutController::new(v.id, tracker, zone, roster.to_vec(), *config))
        }
        PlannerConfig::Hold => Planner::Hold,
    })
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        config.validate()?;
        let map_path = config.resolve(&config.map);
        let grid = load_map_from_meta(&map_path).map_err(|source| ScenarioError::MapLoad {
            path: map_path.clone(),
            source,
        })?;
        config
            .scan
            .validate(grid.resolution())
            .map_err(|e| config_err("scan", e.to_string()))?;
        Self::with_grid(config, grid)
    }

    /// Like [`Scenario::new`] with an already loaded map.
    pub fn with_grid(config: ScenarioConfig, grid: OccupancyGrid) -> Result<Self, ScenarioError> {
        config.validate()?;
        let grid = Arc::new(grid);
        let mut world = World::new(grid.clone(), derive_seed(config.seed, 1));
        let mut vehicles: Vec<&VehicleConfig> = config.vehicles.iter().collect();
        vehicles.sort_by_key(|v| v.id);
        let roster: Vec<VehicleId> = vehicles
            .iter()
            .filter(|v| matches!(v.planner, PlannerConfig::Roundabout { .. }))
            .map(|v| v.id)
            .collect();
        let mut agents = Vec::new();
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5));
        for (i, v) in vehicles.iter().enumerate() {
            let back = if v.start_jitter > 0.0 {
                jitter_rng.random_range(0.0..v.start_jitter)
            } else {
                0.0
            };
            let start = Pose2D::new(
                v.start.x - back * v.start.theta.cos(),
                v.start.y - back * v.start.theta.sin(),
                v.start.theta,
            );
            world.add_vehicle(v.id, VehicleState::new(start, v.v0, 0.0), v.params)?;
            let planner = build_planner(&config, v, &roster).map_err(|e| match e {
                ScenarioError::Config { path, message } => config_err(format!("vehicles[{i}].{path}"), message),
                other => other,
            })?;
            let localizer = match &v.localize {
                Some(s) => Some((
                    Localizer::new(&grid, s.config, s.init, derive_seed(config.seed, 100 + v.id as u64))?,
                    s.clone(),
                )),
                None => None,
            };
            agents.push(Agent {
                id: v.id,
                plan_every: v.plan_every as u64,
                planner_name: v.planner.name(),
                planner,
                localizer,
                odom_acc: Pose2D::origin(),
                estimate: None,
                loc_updates: 0,
                loc_converged: None,
                cmd: ControlCommand::stop(),
                lap_net: 0,
                lap_best: 0,
                lap_times: Vec::new(),
                last_lap_time: 0.0,
                distance: 0.0,
                max_speed: v.v0,
                min_scan: None,
                safe: false,
                holding: false,
                visit: ZoneVisit {
                    entered_at: None,
                    exited_at: None,
                    held_steps: 0,
                },
            });
        }
        let bus = if roster.is_empty() {
            None
        } else {
            let s = &config.v2v;
            Some(match s.transport {
                Transport::Sim => Bus::Sim(SimBus::new(s.channel, derive_seed(config.seed, 2))),
                Transport::Tcp => {
                    let server = V2vServer::bind(("127.0.0.1", s.port), s.channel.staleness_window)?;
                    let mut clients = BTreeMap::new();
                    for id in &roster {
                        clients.insert(*id, V2vClient::connect(server.local_addr(), Duration::from_secs(5))?);
                    }
                    Bus::Tcp {
                        _server: server,
                        clients,
                    }
                }
            })
        };
        Ok(Self {
            config,
            world,
            agents,
            bus,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Runs the episode and writes its logs into `out_dir`.
    pub fn run(mut self, out_dir: impl AsRef<Path>) -> Result<ExitSummary, ScenarioError> {
        let out_dir = out_dir.as_ref();
        let mut logs = Logs::create(out_dir)?;
        let cfg = self.config.clone();
        let dt = cfg.dt;
        let steps = (cfg.duration / dt).round().max(1.0) as u64;
        let mut sense_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
        let mut odom_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
        let clearance_monitor = cfg
            .monitors
            .iter()
            .any(|m| matches!(m.kind, MonitorKind::MinClearance { .. }));
        let res = self.world.grid().resolution();
        let mut collisions = Vec::new();
        let mut violation_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut violation_total = 0;
        let mut zone_stats = cfg.zone.map(|_| ZoneSummary {
            max_occupancy: 0,
            max_inside_intents: 0,
        });
        let (mut published, mut v2v_errors) = (0u64, 0u64);

        for step in 0..steps {
            let now = self.world.time();

            // sensing
            let mut scans: BTreeMap<VehicleId, LaserScan> = BTreeMap::new();
            for a in &self.agents {
                if a.needs_scan(step, clearance_monitor) {
                    scans.insert(a.id, self.world.sense(a.id, &cfg.scan, &cfg.noise, &mut sense_rng)?);
                }
            }
            for a in &mut self.agents {
                if let Some(s) = scans.get(&a.id) {
                    let m = s.min_range();
                    a.min_scan = Some(a.min_scan.map_or(m, |x: f64| x.min(m)));
                }
            }

            // localization
            for a in &mut self.agents {
                let Some((loc, settings)) = &mut a.localizer else { continue };
                if step % settings.update_every as u64 != 0 {
                    continue;
                }
                let delta = std::mem::replace(&mut a.odom_acc, Pose2D::origin());
                loc.predict(&crate::sim::OdomDelta {
                    dx: delta.x,
                    dy: delta.y,
                    dtheta: delta.theta,
                    v: 0.0,
                });
                let est = loc.correct(&scans[&a.id], self.world.grid())?;
                a.loc_updates += 1;
                let truth = self.world.vehicle(a.id)?.state.pose;
                let err = est.distance_to(&truth);
                if a.loc_converged.is_none() && err <= 2.0 * res {
                    a.loc_converged = Some(a.loc_updates);
                }
                a.estimate = Some(est);
                writeln!(
                    logs.localization,
                    "{:.4},{},{:.6},{:.6},{:.6},{:.6}",
                    now, a.id, est.x, est.y, est.theta, err
                )
                .map_err(io_err(out_dir))?;
            }

            // monitors
            let violations: Vec<Violation> = check(&cfg.monitors, &self.world, &scans);
            for v in &violations {
                *violation_counts.entry(v.monitor.clone()).or_default() += 1;
                violation_total += 1;
                writeln!(logs.violations, "{:.4},{},{},{:.6}", v.time, v.monitor, v.vehicle, v.value)
                    .map_err(io_err(out_dir))?;
            }

            // V2V: every planning roundabout vehicle publishes, then all fetch and decide
            if let Some(bus) = &mut self.bus {
                let poses: Vec<(VehicleId, Pose2D)> =
                    self.world.vehicles().iter().map(|v| (v.id, v.state.pose)).collect();
                for a in &mut self.agents {
                    let Planner::Roundabout(ctrl) = &mut a.planner else { continue };
                    if step % a.plan_every != 0 {
                        continue;
                    }
                    let pose = self.world.vehicle(a.id)?.state.pose;
                    ctrl.observe(&pose);
                    let others: Vec<(VehicleId, Pose2D)> =
                        poses.iter().copied().filter(|(id, _)| *id != a.id).collect();
                    let objects =
                        visible_objects(self.world.grid(), &pose, &others, cfg.v2v.range, cfg.scan.march_step);
                    match bus.endpoint(a.id).publish(&ctrl.message(now, objects, a.safe)) {
                        Ok(()) => published += 1,
                        Err(_) => v2v_errors += 1,
                    }
                }
                for a in &mut self.agents {
                    let Planner::Roundabout(ctrl) = &mut a.planner else { continue };
                    if step % a.plan_every != 0 {
                        continue;
                    }
                    let state = self.world.vehicle(a.id)?.state;
                    let peers = bus.endpoint(a.id).fetch(f64::NEG_INFINITY, now);
                    if peers.is_err() {
                        v2v_errors += 1;
                    }
                    let d = ctrl.decide(&state.pose, state.v, peers, dt * a.plan_every as f64);
                    a.safe = d.safe;
                    a.holding = d.holding;
                    a.cmd = d.command;
                }
            }

            // planners
            let peers: Vec<(VehicleId, OrientedRect)> =
                self.world.vehicles().iter().map(|v| (v.id, v.footprint())).collect();
            for a in &mut self.agents {
                if step % a.plan_every != 0 {
                    continue;
                }
                let truth = self.world.vehicle(a.id)?.state;
                let drive_on_estimate = a.localizer.as_ref().is_some_and(|(_, s)| s.drive_on_estimate);
                let pose = match (drive_on_estimate, a.estimate) {
                    (true, Some(est)) => est,
                    _ => truth.pose,
                };
                match &mut a.planner {
                    Planner::Ftg {
                        config,
                        route,
                        lookahead,
                    } => {
                        let goal = route
                            .as_ref()
                            .and_then(|r| find_lookahead_point(r, &pose, *lookahead).ok())
                            .map_or(0.0, |lp| {
                                let (lx, ly) = pose.point_to_local(lp.x, lp.y);
                                ly.atan2(lx)
                            });
                        a.cmd = ftg_command(&scans[&a.id], goal, config);
                    }
                    Planner::Pursuit(pp) => a.cmd = pp.command(&pose).1,
                    Planner::Lattice {
                        region,
                        generator,
                        options,
                    } => {
                        let others: Vec<OrientedRect> =
                            peers.iter().filter(|(id, _)| *id != a.id).map(|(_, r)| *r).collect();
                        let x0 = VehicleState { pose, ..truth };
                        let out = plan_step(&x0, region, self.world.grid(), &others, generator.as_ref(), options);
                        a.cmd = out.command;
                        if let Some(t) = &out.trajectory {
                            for smp in &t.samples {
                                writeln!(
                                    logs.trajectories,
                                    "{:.4},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                                    now, a.id, smp.s, smp.pose.x, smp.pose.y, smp.pose.theta, smp.kappa
                                )
                                .map_err(io_err(out_dir))?;
                            }
                        }
                    }
                    Planner::Roundabout(_) => {}
                    Planner::Hold => a.cmd = ControlCommand::stop(),
                }
            }

            // fail-safe and step
            let commands: BTreeMap<VehicleId, ControlCommand> = self
                .agents
                .iter()
                .map(|a| (a.id, apply_failsafe(a.id, a.cmd, &violations)))
                .collect();
            let before: BTreeMap<VehicleId, VehicleState> =
                self.world.vehicles().iter().map(|v| (v.id, v.state)).collect();
            let events = self.world.step(&commands, dt)?;
            collisions.extend(events);
            let t = self.world.time();

            let mut inside_intents = 0;
            let mut occupancy = 0;
            for a in &mut self.agents {
                let v = self.world.vehicle(a.id)?;
                let prev = before[&a.id];
                let o = odometry(&prev, &v.state, &cfg.noise, &mut odom_rng);
                if a.localizer.is_some() {
                    a.odom_acc = a.odom_acc.compose(&Pose2D::new(o.dx, o.dy, o.dtheta));
                }
                a.distance += prev.pose.distance_to(&v.state.pose);
                a.max_speed = a.max_speed.max(v.state.v);

                if let Some(line) = &cfg.lap_line {
                    let dir = line.crossing((prev.pose.x, prev.pose.y), (v.state.pose.x, v.state.pose.y));
                    a.lap_net += dir as i64;
                    if a.lap_net > a.lap_best {
                        a.lap_best = a.lap_net;
                        a.lap_times.push(t - a.last_lap_time);
                        a.last_lap_time = t;
                    }
                }
                if let Some(zone) = &cfg.zone {
                    let inside = zone.contains(v.state.pose.x, v.state.pose.y);
                    if inside {
                        occupancy += 1;
                        a.visit.entered_at.get_or_insert(t);
                    } else if a.visit.entered_at.is_some() && a.visit.exited_at.is_none() {
                        a.visit.exited_at = Some(t);
                    }
                }
                if let Planner::Roundabout(ctrl) = &a.planner {
                    if ctrl.intent() == Intent::Inside {
                        inside_intents += 1;
                    }
                    if a.holding && v.state.v < 1e-9 {
                        a.visit.held_steps += 1;
                    }
                }
                let sent = commands[&a.id];
                writeln!(
                    logs.episode,
                    "{:.4},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                    t,
                    a.id,
                    v.state.pose.x,
                    v.state.pose.y,
                    v.state.pose.theta,
                    v.state.v,
                    v.state.kappa,
                    sent.speed,
                    sent.kappa,
                    u8::from(v.collided)
                )
                .map_err(io_err(out_dir))?;
            }
            if let Some(z) = &mut zone_stats {
                z.max_occupancy = z.max_occupancy.max(occupancy);
                z.max_inside_intents = z.max_inside_intents.max(inside_intents);
            }
        }
        logs.flush(out_dir)?;

        let mut vehicles = Vec::new();
        for a in &self.agents {
            let v = self.world.vehicle(a.id)?;
            vehicles.push(VehicleSummary {
                id: a.id,
                planner: a.planner_name.to_string(),
                laps: a.lap_times.len() as u32,
                lap_times: a.lap_times.clone(),
                collided: v.collided,
                distance: a.distance,
                final_pose: v.state.pose,
                max_speed: a.max_speed,
                min_scan_range: a.min_scan,
                localization: a.localizer.as_ref().map(|(loc, _)| LocalizationSummary {
                    updates: a.loc_updates,
                    final_error: a.estimate.map_or(f64::NAN, |e| e.distance_to(&v.state.pose)),
                    converged_after: a.loc_converged,
                    injected: loc.injected,
                }),
                zone: cfg.zone.map(|_| a.visit.clone()),
            });
        }
        let v2v = self.bus.as_ref().map(|b| V2vSummary {
            transport: cfg.v2v.transport,
            published,
            dropped: match b {
                Bus::Sim(bus) => bus.dropped(),
                Bus::Tcp { .. } => 0,
            },
            errors: v2v_errors,
        });
        let summary = ExitSummary {
            schema_version: SCHEMA_VERSION,
            seed: cfg.seed,
            duration: cfg.duration,
            dt,
            steps,
            laps: vehicles.iter().map(|v| v.laps).sum(),
            vehicles,
            collisions,
            violations: violation_total,
            violations_by_monitor: violation_counts,
            zone: zone_stats,
            v2v,
            logs: LogPaths {
                episode: EPISODE_CSV.into(),
                violations: VIOLATIONS_CSV.into(),
                localization: LOCALIZATION_CSV.into(),
                trajectories: TRAJECTORIES_CSV.into(),
            },
            log_dir: out_dir.to_path_buf(),
        };
        let sp = out_dir.join(SUMMARY_JSON);
        std::fs::write(&sp, summary.to_json()).map_err(io_err(&sp))?;
        Ok(summary)
    }
}

/// Loads, validates and runs a scenario, writing logs into `out_dir`.
pub fn run_scenario(config: ScenarioConfig, out_dir: impl AsRef<Path>) -> Result<ExitSummary, ScenarioError> {
    Scenario::new(config)?.run(out_dir)
}

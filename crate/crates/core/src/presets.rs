//! Bundled scenarios, written out as map, route and config files.

use std::path::{Path, PathBuf};

use crate::ftg::FtgConfig;
use crate::geom::Pose2D;
use crate::lattice::{BvpOptions, PlannerOptions};
use crate::localize::{InitMode, LocalizerConfig};
use crate::map::{save_map, MapError, OccupancyGrid};
use crate::monitor::{MonitorKind, MonitorSpec, Severity};
use crate::path::{waypoints_to_csv, Waypoint, WaypointPath};
use crate::pursuit::PursuitConfig;
use crate::raycast::ScanConfig;
use crate::scenario::{
    LocalizeSettings, PlannerConfig, RbfTraining, RegionConfig, ScenarioConfig, Transport, V2vSettings,
    VehicleConfig,
};
use crate::sim::{NoiseConfig, VehicleId, VehicleParams};
use crate::tracks::{asymmetric_room, obstacle_oval, oval, roundabout, OvalSpec, RoundaboutSpec};
use crate::v2v::{ChannelConfig, RoundaboutConfig};

/// A scenario plus the files it refers to.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub config: ScenarioConfig,
    pub maps: Vec<(String, OccupancyGrid)>,
    pub routes: Vec<(String, WaypointPath)>,
}

impl Preset {
    /// Writes every file into `dir` and returns the config path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf, std::io::Error> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (stem, grid) in &self.maps {
            save_map(grid, dir, stem).map_err(std::io::Error::other)?;
        }
        for (file, route) in &self.routes {
            std::fs::write(dir.join(file), waypoints_to_csv(route))?;
        }
        let path = dir.join(format!("{}.json", self.name));
        std::fs::write(&path, self.config.to_json() + "\n")?;
        Ok(path)
    }

    /// The config with its base directory set to `dir`, after [`Preset::write`].
    pub fn config_in(&self, dir: impl AsRef<Path>) -> ScenarioConfig {
        ScenarioConfig {
            base_dir: dir.as_ref().to_path_buf(),
            ..self.config.clone()
        }
    }
}

fn base(map: &str, duration: f64, vehicles: Vec<VehicleConfig>) -> ScenarioConfig {
    ScenarioConfig {
        map: format!("{map}.yaml").into(),
        duration,
        dt: 0.01,
        seed: 0,
        scan: ScanConfig::default(),
        noise: NoiseConfig::default(),
        lap_line: None,
        monitors: Vec::new(),
        v2v: V2vSettings::default(),
        zone: None,
        vehicles,
        base_dir: PathBuf::new(),
    }
}

fn vehicle(id: VehicleId, start: Pose2D, planner: PlannerConfig) -> VehicleConfig {
    VehicleConfig {
        id,
        start,
        start_jitter: 0.0,
        v0: 0.0,
        params: VehicleParams::default(),
        plan_every: 1,
        localize: None,
        planner,
    }
}

fn track_monitors() -> Vec<MonitorSpec> {
    vec![
        MonitorSpec::new("on_track", MonitorKind::OnTrack, Severity::Warn),
        MonitorSpec::new("speed_cap", MonitorKind::MaxSpeed { limit: 7.5 }, Severity::Warn),
    ]
}

/// Pure pursuit around the default oval.
pub fn pursuit_oval() -> Result<Preset, MapError> {
    let t = oval(&OvalSpec::default())?;
    let mut cfg = base(
        "oval",
        60.0,
        vec![vehicle(
            1,
            t.start,
            PlannerConfig::Pursuit {
                waypoints: "oval_centerline.csv".into(),
                closed: true,
                config: PursuitConfig {
                    lookahead: 1.0,
                    default_speed: 2.0,
                    kappa_max: 3.0,
                },
            },
        )],
    );
    cfg.lap_line = Some(t.lap_line);
    cfg.monitors = track_monitors();
    Ok(Preset {
        name: "pursuit_oval",
        config: cfg,
        maps: vec![("oval".into(), t.grid)],
        routes: vec![("oval_centerline.csv".into(), t.centerline)],
    })
}

/// Pure pursuit on a 3 m ring.
pub fn pursuit_circle() -> Result<Preset, MapError> {
    let spec = OvalSpec {
        straight: 0.0,
        radius: 3.0,
        speed: 1.5,
        ..OvalSpec::default()
    };
    let t = oval(&spec)?;
    let mut cfg = base(
        "ring",
        20.0,
        vec![vehicle(
            1,
            t.start,
            PlannerConfig::Pursuit {
                waypoints: "ring_centerline.csv".into(),
                closed: true,
                config: PursuitConfig {
                    lookahead: 1.0,
                    default_speed: 1.5,
                    kappa_max: 3.0,
                },
            },
        )],
    );
    cfg.lap_line = Some(t.lap_line);
    cfg.monitors = track_monitors();
    Ok(Preset {
        name: "pursuit_circle",
        config: cfg,
        maps: vec![("ring".into(), t.grid)],
        routes: vec![("ring_centerline.csv".into(), t.centerline)],
    })
}

/// Follow-the-gap through an oval with boxes on the straights.
pub fn ftg_obstacles() -> Result<Preset, MapError> {
    let t = obstacle_oval(&OvalSpec::default())?;
    let mut v = vehicle(
        1,
        t.start,
        PlannerConfig::Ftg {
            config: FtgConfig {
                speed_nominal: 1.5,
                gap_threshold: 1.2,
                ..FtgConfig::default()
            },
            waypoints: Some("oval_centerline.csv".into()),
            goal_lookahead: 1.5,
        },
    );
    v.plan_every = 5;
    let mut cfg = base("obstacle_oval", 60.0, vec![v]);
    cfg.lap_line = Some(t.lap_line);
    cfg.monitors = track_monitors();
    Ok(Preset {
        name: "ftg_obstacles",
        config: cfg,
        maps: vec![("obstacle_oval".into(), t.grid)],
        routes: vec![("oval_centerline.csv".into(), t.centerline)],
    })
}

fn lattice_preset(name: &'static str, planner: PlannerConfig) -> Result<Preset, MapError> {
    let t = obstacle_oval(&OvalSpec::default())?;
    let mut v = vehicle(1, t.start, planner);
    v.plan_every = 10;
    let mut cfg = base("obstacle_oval", 60.0, vec![v]);
    cfg.lap_line = Some(t.lap_line);
    cfg.monitors = track_monitors();
    Ok(Preset {
        name,
        config: cfg,
        maps: vec![("obstacle_oval".into(), t.grid)],
        routes: vec![("oval_centerline.csv".into(), t.centerline)],
    })
}

fn lattice_options() -> PlannerOptions {
    let mut o = PlannerOptions::default();
    o.limits.v_max = 2.5;
    o
}

/// Spline lattice planner solving every goal's boundary-value problem.
pub fn lattice_oval() -> Result<Preset, MapError> {
    lattice_preset(
        "lattice_oval",
        PlannerConfig::Lattice {
            waypoints: "oval_centerline.csv".into(),
            closed: true,
            region: RegionConfig::default(),
            bvp: BvpOptions::default(),
            options: lattice_options(),
        },
    )
}

/// The same lattice planner with the learned approximation as generator.
pub fn rbf_oval() -> Result<Preset, MapError> {
    lattice_preset(
        "rbf_oval",
        PlannerConfig::Rbf {
            waypoints: "oval_centerline.csv".into(),
            closed: true,
            region: RegionConfig::default(),
            network: None,
            training: RbfTraining::default(),
            options: lattice_options(),
        },
    )
}

/// Three vehicles meeting at an occluded roundabout.
pub fn roundabout_scenario(name: &'static str, vehicles: usize, channel: ChannelConfig, transport: Transport) -> Result<Preset, MapError> {
    let spec = RoundaboutSpec::default();
    let t = roundabout(&spec)?;
    let mut cfg = base("roundabout", 40.0, Vec::new());
    let mut routes = Vec::new();
    for arm in 0..vehicles.min(spec.arms) {
        let id = arm as VehicleId + 1;
        let file = format!("roundabout_arm{arm}.csv");
        let mut v = vehicle(
            id,
            t.approach_pose(&spec, arm, 5.0),
            PlannerConfig::Roundabout {
                waypoints: file.clone().into(),
                pursuit: PursuitConfig {
                    lookahead: 0.8,
                    default_speed: spec.speed,
                    kappa_max: 3.0,
                },
                config: RoundaboutConfig::default(),
            },
        );
        v.start_jitter = 2.0;
        v.plan_every = 5;
        cfg.vehicles.push(v);
        routes.push((file, t.routes[arm].clone()));
    }
    cfg.zone = Some(t.zone);
    cfg.v2v = V2vSettings {
        transport,
        channel,
        ..V2vSettings::default()
    };
    cfg.monitors = vec![MonitorSpec::new(
        "zone_exclusion",
        MonitorKind::MutualExclusion { zone: t.zone },
        Severity::Warn,
    )];
    Ok(Preset {
        name,
        config: cfg,
        maps: vec![("roundabout".into(), t.grid)],
        routes,
    })
}

/// Stationary vehicle localizing from a uniform prior.
pub fn localize_room() -> Result<Preset, MapError> {
    let grid = asymmetric_room(0.05)?;
    let mut v = vehicle(1, Pose2D::new(2.6, 2.1, 0.7), PlannerConfig::Hold);
    v.localize = Some(LocalizeSettings {
        config: LocalizerConfig::default(),
        init: InitMode::UniformFree,
        update_every: 1,
        drive_on_estimate: false,
    });
    Ok(Preset {
        name: "localize_room",
        config: base("room", 0.3, vec![v]),
        maps: vec![("room".into(), grid)],
        routes: Vec::new(),
    })
}

/// Corridor ending in a wall, driven into with a stop-on-clearance monitor.
pub fn failsafe_wall() -> Result<Preset, MapError> {
    let mut grid = OccupancyGrid::new(220, 60, 0.05, Pose2D::new(-0.5, -1.5, 0.0), 0.65)?;
    grid.fill_where(|x, y| y.abs() > 1.0 || x > 8.0 || x < 0.0);
    let route = WaypointPath::new(
        (0..=12).map(|i| Waypoint::new(i as f64, 0.0, 1.0)).collect(),
        false,
    )
    .map_err(|e| MapError::InvalidGrid(e.to_string()))?;
    let mut v = vehicle(
        1,
        Pose2D::new(2.0, 0.0, 0.0),
        PlannerConfig::Pursuit {
            waypoints: "corridor_route.csv".into(),
            closed: false,
            config: PursuitConfig {
                lookahead: 1.0,
                default_speed: 1.0,
                kappa_max: 3.0,
            },
        },
    );
    v.start_jitter = 1.5;
    let mut cfg = base("corridor", 10.0, vec![v]);
    cfg.scan = ScanConfig {
        beam_count: 271,
        range_max: 5.0,
        ..ScanConfig::default()
    };
    cfg.monitors = vec![MonitorSpec::new(
        "clearance",
        MonitorKind::MinClearance { limit: 0.6 },
        Severity::Failsafe,
    )];
    Ok(Preset {
        name: "failsafe_wall",
        config: cfg,
        maps: vec![("corridor".into(), grid)],
        routes: vec![("corridor_route.csv".into(), route)],
    })
}

pub fn all() -> Result<Vec<Preset>, MapError> {
    Ok(vec![
        pursuit_oval()?,
        pursuit_circle()?,
        ftg_obstacles()?,
        lattice_oval()?,
        rbf_oval()?,
        roundabout_scenario("roundabout", 3, ChannelConfig::default(), Transport::Sim)?,
        roundabout_scenario("roundabout_tcp", 3, ChannelConfig::default(), Transport::Tcp)?,
        roundabout_scenario(
            "roundabout_blackout",
            3,
            ChannelConfig {
                loss: 1.0,
                ..ChannelConfig::default()
            },
            Transport::Sim,
        )?,
        roundabout_scenario("roundabout_solo", 1, ChannelConfig::default(), Transport::Sim)?,
        localize_room()?,
        failsafe_wall()?,
    ])
}

//! Runtime monitors checked every step, with an optional stop override.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::ControlCommand;
use crate::raycast::LaserScan;
use crate::sim::{footprint_overlap_count, VehicleId, World};
use crate::v2v::ConflictZone;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MonitorKind {
    MinClearance { limit: f64 },
    MaxSpeed { limit: f64 },
    OnTrack,
    MutualExclusion { zone: ConflictZone },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Warn,
    Failsafe,
}

/// Serialized as one flat object: `name`, `kind`, `severity`, plus `limit`
/// or `zone` as the kind requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMonitor", into = "RawMonitor")]
pub struct MonitorSpec {
    pub name: String,
    pub kind: MonitorKind,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
enum KindTag {
    MinClearance,
    MaxSpeed,
    OnTrack,
    MutualExclusion,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonitor {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limit: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zone: Option<ConflictZone>,
    severity: Severity,
}

impl TryFrom<RawMonitor> for MonitorSpec {
    type Error = String;

    fn try_from(r: RawMonitor) -> Result<Self, String> {
        let need_limit = || r.limit.ok_or_else(|| format!("{:?} monitor needs `limit`", r.kind));
        let kind = match r.kind {
            KindTag::MinClearance => MonitorKind::MinClearance { limit: need_limit()? },
            KindTag::MaxSpeed => MonitorKind::MaxSpeed { limit: need_limit()? },
            KindTag::OnTrack => MonitorKind::OnTrack,
            KindTag::MutualExclusion => MonitorKind::MutualExclusion {
                zone: r.zone.ok_or("MUTUAL_EXCLUSION monitor needs `zone`")?,
            },
        };
        let stray = match kind {
            MonitorKind::MinClearance { .. } | MonitorKind::MaxSpeed { .. } => r.zone.is_some(),
            MonitorKind::OnTrack => r.limit.is_some() || r.zone.is_some(),
            MonitorKind::MutualExclusion { .. } => r.limit.is_some(),
        };
        if stray {
            return Err(format!("monitor `{}` has a field its kind does not use", r.name));
        }
        Ok(MonitorSpec {
            name: r.name,
            kind,
            severity: r.severity,
        })
    }
}

impl From<MonitorSpec> for RawMonitor {
    fn from(m: MonitorSpec) -> Self {
        let (kind, limit, zone) = match m.kind {
            MonitorKind::MinClearance { limit } => (KindTag::MinClearance, Some(limit), None),
            MonitorKind::MaxSpeed { limit } => (KindTag::MaxSpeed, Some(limit), None),
            MonitorKind::OnTrack => (KindTag::OnTrack, None, None),
            MonitorKind::MutualExclusion { zone } => (KindTag::MutualExclusion, None, Some(zone)),
        };
        RawMonitor {
            name: m.name,
            kind,
            limit,
            zone,
            severity: m.severity,
        }
    }
}

impl MonitorSpec {
    pub fn new(name: impl Into<String>, kind: MonitorKind, severity: Severity) -> Self {
        Self {
            name: name.into(),
            kind,
            severity,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match &self.kind {
            MonitorKind::MinClearance { limit } | MonitorKind::MaxSpeed { limit } if !(*limit > 0.0) => {
                Err(format!("monitor `{}`: limit must be positive", self.name))
            }
            MonitorKind::MutualExclusion { zone } => zone.validate().map_err(|e| format!("monitor `{}`: {e}", self.name)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub monitor: String,
    pub vehicle: VehicleId,
    pub time: f64,
    /// Measured quantity: clearance, speed, overlapped cells or occupant count.
    pub value: f64,
    pub severity: Severity,
    /// Every vehicle involved; for mutual exclusion, all zone occupants.
    pub involved: Vec<VehicleId>,
}

/// Evaluates every monitor on the current world state. Vehicles without a
/// scan are skipped by clearance monitors.
pub fn check(specs: &[MonitorSpec], world: &World, scans: &BTreeMap<VehicleId, LaserScan>) -> Vec<Violation> {
    let time = world.time();
    let mut out = Vec::new();
    for spec in specs {
        let mut push = |vehicle: VehicleId, value: f64, involved: Vec<VehicleId>| {
            out.push(Violation {
                monitor: spec.name.clone(),
                vehicle,
                time,
                value,
                severity: spec.severity,
                involved,
            })
        };
        match spec.kind {
            MonitorKind::MinClearance { limit } => {
                for v in world.vehicles() {
                    if let Some(scan) = scans.get(&v.id) {
                        let d = scan.min_range();
                        if d < limit {
                            push(v.id, d, vec![v.id]);
                        }
                    }
                }
            }
            MonitorKind::MaxSpeed { limit } => {
                for v in world.vehicles() {
                    if v.state.v > limit {
                        push(v.id, v.state.v, vec![v.id]);
                    }
                }
            }
            MonitorKind::OnTrack => {
                for v in world.vehicles() {
                    let n = footprint_overlap_count(world.grid(), &v.footprint());
                    if n > 0 {
                        push(v.id, n as f64, vec![v.id]);
                    }
                }
            }
            MonitorKind::MutualExclusion { zone } => {
                let occupants: Vec<VehicleId> = world
                    .vehicles()
                    .iter()
                    .filter(|v| zone.contains(v.state.pose.x, v.state.pose.y))
                    .map(|v| v.id)
                    .collect();
                if occupants.len() > zone.capacity {
                    for &id in &occupants {
                        push(id, occupants.len() as f64, occupants.clone());
                    }
                }
            }
        }
    }
    out
}

/// Zeroes the speed if `vehicle` has any fail-safe violation; curvature is kept.
pub fn apply_failsafe(vehicle: VehicleId, cmd: ControlCommand, violations: &[Violation]) -> ControlCommand {
    let trip = violations
        .iter()
        .any(|v| v.severity == Severity::Failsafe && v.vehicle == vehicle);
    if trip {
        ControlCommand { speed: 0.0, ..cmd }
    } else {
        cmd
    }
}

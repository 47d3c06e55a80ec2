//! Offline training run for the learned trajectory generator: solve the
//! goal lattice, fit the network, score it at the lattice midpoints and
//! time its inference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2D, VehicleState};
use crate::lattice::BvpOptions;
use crate::rbf::{build_training_set, test_error, train_rbf, GoalLattice, RbfError, RbfNetwork, RbfOptions, TestReport, TrainingSet};

pub const NETWORK_FILE: &str = "network.txt";
pub const DATASET_FILE: &str = "dataset.csv";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Rbf(#[from] RbfError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbfPipelineConfig {
    pub lattice: GoalLattice,
    pub options: RbfOptions,
    pub bvp: BvpOptions,
    /// Curvature at the start of every training trajectory.
    pub start_kappa: f64,
    /// Queries timed for the throughput figure.
    pub throughput_samples: usize,
    /// Seed of the throughput query draw.
    pub seed: u64,
}

impl Default for RbfPipelineConfig {
    fn default() -> Self {
        Self {
            lattice: GoalLattice::default(),
            options: RbfOptions::default(),
            bvp: BvpOptions::default(),
            start_kappa: 0.0,
            throughput_samples: 100_000,
            seed: 0,
        }
    }
}

impl RbfPipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| PipelineError::Config {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RbfReport {
    pub centers: usize,
    pub excluded: usize,
    pub epsilon: f64,
    pub training_residual: f64,
    pub jitter_applied: bool,
    pub test: TestReport,
    /// Single-thread inferences per second.
    pub throughput: f64,
}

impl RbfReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "centers (M): {}", self.centers);
        let _ = writeln!(s, "excluded goals: {}", self.excluded);
        let _ = writeln!(s, "epsilon: {:.6}", self.epsilon);
        let _ = writeln!(s, "training residual (relative): {:.3e}", self.training_residual);
        let _ = writeln!(s, "jitter applied: {}", self.jitter_applied);
        let _ = writeln!(s, "test goals: {}", self.test.count);
        let _ = writeln!(s, "worst-case test error: {:.4}%", 100.0 * self.test.worst);
        let _ = writeln!(s, "mean test error: {:.4}%", 100.0 * self.test.mean);
        let _ = writeln!(s, "inference throughput: {:.0} /s (single thread)", self.throughput);
        s
    }
}

pub fn dataset_csv(set: &TrainingSet) -> String {
    let mut s = String::from("goal_x,goal_y,goal_theta,s,a,b,c,d\n");
    for smp in &set.samples {
        let p = &smp.params;
        let _ = writeln!(
            s,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            smp.goal.x, smp.goal.y, smp.goal.theta, p.s, p.a, p.b, p.c, p.d
        );
    }
    s
}

/// Timed single-thread inference over seeded goals inside the lattice box.
pub fn measure_throughput(net: &RbfNetwork, lattice: &GoalLattice, samples: usize, seed: u64) -> Result<f64, RbfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |a: &crate::rbf::Axis| {
        if a.max > a.min {
            rng.random_range(a.min..=a.max)
        } else {
            a.min
        }
    };
    let goals: Vec<Pose2D> = (0..samples.max(1))
        .map(|_| Pose2D::new(draw(&lattice.x), draw(&lattice.y), draw(&lattice.theta)))
        .collect();
    let start = Instant::now();
    let mut acc = 0.0;
    for g in &goals {
        acc += net.infer(g)?.s;
    }
    std::hint::black_box(acc);
    Ok(goals.len() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Trains and evaluates a network, writing the network, dataset and report
/// into `out_dir`.
pub fn rbf_pipeline(cfg: &RbfPipelineConfig, out_dir: impl AsRef<Path>) -> Result<RbfReport, PipelineError> {
    let out_dir = out_dir.as_ref();
    let io = |path: PathBuf| move |source| PipelineError::Io { path, source };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir.to_path_buf()))?;

    let x0 = VehicleState {
        kappa: cfg.start_kappa,
        ..VehicleState::default()
    };
    let set = build_training_set(&x0, &cfg.lattice.points(), &cfg.bvp)?;
    let net = train_rbf(&set, &cfg.options)?;
    let test = test_error(&net, &cfg.lattice.midpoints(), &cfg.lattice.error_scale(), &cfg.bvp)?;
    let throughput = measure_throughput(&net, &cfg.lattice, cfg.throughput_samples, cfg.seed)?;
    let report = RbfReport {
        centers: net.len(),
        excluded: set.excluded,
        epsilon: net.epsilon(),
        training_residual: net.training_residual(),
        jitter_applied: net.jitter_applied(),
        test,
        throughput,
    };
    for (name, body) in [
        (NETWORK_FILE, net.to_text()),
        (DATASET_FILE, dataset_csv(&set)),
        (REPORT_FILE, report.to_text()),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(io(p.clone()))?;
    }
    Ok(report)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use racekit::pipeline::{rbf_pipeline, RbfPipelineConfig};
use racekit::plot::emit_plot;
use racekit::presets;
use racekit::scenario::{run_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "racekit", version, about = "Deterministic 2D racing simulator and planner testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its logs.
    Run {
        config: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Log directory (default: logs/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an episode log over its map as SVG.
    Plot {
        /// Episode CSV or the log directory containing it.
        log: PathBuf,
        /// Map metadata file.
        map: PathBuf,
        out: PathBuf,
    },
    /// Train the learned trajectory generator and write a report.
    RbfTrain {
        config: PathBuf,
        /// Output directory (default: next to the config, named after it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled scenarios (maps, routes, configs) into a directory.
    GenScenarios { dir: PathBuf },
}

fn default_out(config: &Path, prefix: &str) -> PathBuf {
    let stem = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from(prefix).join(stem)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            duration,
            out,
        } => {
            let cfg = ScenarioConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?
                .with_overrides(seed, duration);
            let out = out.unwrap_or_else(|| default_out(&config, "logs"));
            let summary = run_scenario(cfg, &out).with_context(|| format!("running {}", config.display()))?;
            print!("{}", summary.to_json());
            eprintln!("logs written to {}", out.display());
        }
        Command::Plot { log, map, out } => {
            emit_plot(&log, &map, &out).with_context(|| format!("plotting {}", log.display()))?;
            eprintln!("wrote {}", out.display());
        }
        Command::RbfTrain { config, out } => {
            let cfg = RbfPipelineConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let out = out.unwrap_or_else(|| default_out(&config, "rbf"));
            let report = rbf_pipeline(&cfg, &out).context("training pipeline failed")?;
            print!("{}", report.to_text());
            eprintln!("artifacts written to {}", out.display());
        }
        Command::GenScenarios { dir } => {
            let all = presets::all().context("building scenarios")?;
            for p in &all {
                let path = p.write(&dir).with_context(|| format!("writing {}", p.name))?;
                println!("{}", path.display());
            }
            let rbf = dir.join("rbf_train.json");
            let text = serde_json::to_string_pretty(&RbfPipelineConfig::default())? + "\n";
            std::fs::write(&rbf, text).with_context(|| format!("writing {}", rbf.display()))?;
            println!("{}", rbf.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

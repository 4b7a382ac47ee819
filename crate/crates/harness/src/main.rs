use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Parser;

use topo_nav::config::{parse_config, ExperimentKind};
use topo_nav::experiments;

const OUT_ENV: &str = "TOPO_NAV_OUT";

/// Synthetic-world experiments for map-conditioned steering models.
///
/// Commands: calibration, localization, confusion, matching, drive (experiments);
/// world, simulate, train (utilities).
#[derive(Debug, Parser)]
#[command(name = "topo-nav", version)]
struct Cli {
    /// Experiment or utility to run.
    command: String,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides $TOPO_NAV_OUT and the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<()> {
    let text = std::fs::read_to_string(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)) {
        cfg.output_dir = out;
    }
    let artifacts = match cli.command.as_str() {
        "world" => experiments::world(&cfg)?,
        "simulate" => experiments::simulate(&cfg)?,
        "train" => experiments::train_artifacts(&cfg)?.1,
        name => {
            let Ok(kind) = ExperimentKind::from_str(name) else {
                bail!(
                    "unknown experiment {name:?}; expected one of {}, world, simulate, train",
                    ExperimentKind::ALL.map(|k| k.name()).join(", ")
                );
            };
            cfg.experiment = kind;
            experiments::run_experiment(&cfg, None)?
        }
    };
    for path in artifacts.commit(&cfg.output_dir, &cfg, &cli.command)? {
        println!("{}", path.display());
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

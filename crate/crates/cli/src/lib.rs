//! Command line front end for the β-VAE monitoring pipeline.
//!
//! Every stage reads and writes artifacts under one output directory, so the
//! stages can be run one at a time or all at once with `pipeline`. Exit codes:
//! 0 on success, 1 on a domain error, 2 on a usage error.

pub mod artifacts;
mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

pub use artifacts::Artifacts;
pub use config::PipelineConfig;
pub use error::{CliError, CliResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "bvae-ood", version, about = "β-VAE out-of-distribution monitoring pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    pub out: PathBuf,

    /// Override a configuration value, e.g. `--set model.beta=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the training and test scene suites, or a single scene file.
    Generate {
        /// Render only this scene file, directly into the output directory.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Split training frames and group scenes into feature partitions.
    Partition,
    /// Search the latent size and β for the most disentangled model.
    Search,
    /// Train the final model with the best searched (or configured) settings.
    Train,
    /// Map each partition to its most responsive latents.
    Map,
    /// Score calibration frames and write the detector profile.
    Calibrate,
    /// Run the monitor over every scene of a dataset and write flag traces.
    Detect {
        /// Dataset directory; defaults to the generated test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score detector and reasoner traces against the test labels.
    Evaluate,
    /// Run every stage from generation to evaluation.
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Partition => "partition",
            Command::Search => "search",
            Command::Train => "train",
            Command::Map => "map",
            Command::Calibrate => "calibrate",
            Command::Detect { .. } => "detect",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let art = Artifacts::new(&cli.out);
    let _lock = artifacts::DirLock::acquire(&art.root)?;
    match &cli.command {
        Command::Pipeline => {
            for stage in [
                Command::Generate { spec: None },
                Command::Partition,
                Command::Search,
                Command::Train,
                Command::Map,
                Command::Calibrate,
                Command::Detect { data: None },
                Command::Evaluate,
            ] {
                run_stage(&art, &config, &stage)?;
            }
            Ok(())
        }
        command => run_stage(&art, &config, command),
    }
}

fn run_stage(art: &Artifacts, config: &PipelineConfig, command: &Command) -> CliResult<()> {
    log::info!("{}: starting", command.name());
    let start = Instant::now();
    let result: Value = match command {
        Command::Generate { spec: Some(spec) } => commands::generate_spec(art, config, spec)?,
        Command::Generate { spec: None } => commands::generate(art, config)?,
        Command::Partition => commands::partition(art, config)?,
        Command::Search => commands::search(art, config)?,
        Command::Train => commands::train(art, config)?,
        Command::Map => commands::map(art, config)?,
        Command::Calibrate => commands::calibrate(art, config)?,
        Command::Detect { data } => commands::detect(art, data.as_deref())?,
        Command::Evaluate => {
            let (metrics, record) = commands::evaluate(art)?;
            println!(
                "precision {:.4}  recall {:.4}  F1 {:.4}  min sensitivity {:.4}",
                metrics.precision, metrics.recall, metrics.f1, metrics.min_sensitivity
            );
            for s in &metrics.scenes {
                if let Some(ok) = s.attribution_correct() {
                    println!("  {}: attribution {}", s.name, if ok { "correct" } else { "wrong" });
                }
            }
            record
        }
        Command::Pipeline => unreachable!("pipeline is expanded by the caller"),
    };
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{}: done in {seconds:.1} s", command.name());
    art.append_summary(&json!({
        "command": command.name(),
        "seed": config.seed,
        "seconds": seconds,
        "result": result,
    }))
}

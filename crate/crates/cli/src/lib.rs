//! Command-line orchestration of the mobility generation pipeline.
//!
//! A run is described by one JSON [`config::RunConfig`]. Every subcommand is a
//! stage that writes into its own directory under the work directory and
//! records a [`manifest::Manifest`]; a stage whose config and inputs are
//! unchanged is skipped unless `--force` is given.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::CliError;
use crate::stages::{e2e_stages, run_stage, Ctx, Outcome, Stage};

#[derive(Debug, Parser)]
#[command(
    name = "mobiforge",
    version,
    about = "Synthetic mobility pipeline: train, generate, evaluate, audit"
)]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set generator.train.lr=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Re-run stages even when their manifest is current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads within a stage.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Replaces `paths.workdir`.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build a region partition from seed points and POIs.
    Partition,
    /// Generate a synthetic city with planted commuter routines.
    SynthData,
    /// Load and split external trajectories on the partitioned map.
    Ingest,
    /// Train the neural planner (or register the remote backend).
    TrainPlanner,
    /// Train the shared encoder and the city decoder.
    TrainEmbed,
    /// Fit a decoder for another city with the encoder frozen.
    AdaptCity,
    /// Train the diffusion generator.
    TrainGen,
    /// Sample trajectories from the test anchors.
    Generate,
    /// Score generated trajectories (and an EPR baseline) against the test split.
    Evaluate,
    /// Run the similarity, membership-inference and utility audits.
    Audit,
    /// Run every stage in order.
    E2e,
    /// Print the resolved config and its hash.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Partition => Stage::Partition,
            Command::SynthData => Stage::SynthData,
            Command::Ingest => Stage::Ingest,
            Command::TrainPlanner => Stage::TrainPlanner,
            Command::TrainEmbed => Stage::TrainEmbed,
            Command::AdaptCity => Stage::AdaptCity,
            Command::TrainGen => Stage::TrainGen,
            Command::Generate => Stage::Generate,
            Command::Evaluate => Stage::Evaluate,
            Command::Audit => Stage::Audit,
            Command::E2e | Command::ShowConfig => return None,
        })
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let mut cfg = config::load(path, &cli.overrides)?;
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    if cli.command == Command::ShowConfig {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        println!("config hash: {}", cfg.hash());
        let ctx = Ctx::new(cfg, false, 1);
        for stage in e2e_stages(&ctx.cfg) {
            println!("{}: {}", stage.name(), ctx.stage_hash(stage));
        }
        return Ok(());
    }
    let ctx = Ctx::new(cfg, cli.force, cli.jobs);
    let stages = match cli.command.stage() {
        Some(s) => vec![s],
        None => e2e_stages(&ctx.cfg),
    };
    for stage in stages {
        if run_stage(&ctx, stage)? == Outcome::UpToDate {
            println!("{}: up to date", stage.name());
        }
    }
    if cli.command == Command::E2e {
        println!(
            "report: {}",
            ctx.workdir
                .join(Stage::Evaluate.dir())
                .join("report.json")
                .display()
        );
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end: robot inspection and the datagen, train, sample,
//! refine and eval pipeline stages.

mod config;
mod describe;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::stages::{Ctx, Stage};

#[derive(Parser)]
#[command(
    name = "treeik",
    version,
    about = "Diffusion-based inverse kinematics for kinematic trees",
    after_help = "Config values can be overridden with --section.key=value (e.g. --train.epochs=5) \
                  or --robot/--dataset/--checkpoint/--seed=value."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the kinematic tree of a robot description.
    Describe {
        /// Robot description file; defaults to `robot` from --config.
        robot: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a collision-free training dataset.
    Datagen(RunArgs),
    /// Train the denoiser on the dataset.
    Train(RunArgs),
    /// Draw configurations for test goals from the trained model.
    Sample(RunArgs),
    /// Refine sampled configurations with damped least squares.
    Refine(RunArgs),
    /// Run the configured benchmark scenario.
    Eval(RunArgs),
    /// Run every stage in order, skipping those that are up to date.
    All(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Worker threads; defaults to $TREEIK_WORKERS, else 1.
    #[arg(long)]
    workers: Option<usize>,
}

fn context(args: &RunArgs, overrides: &[(String, String)]) -> Result<Ctx> {
    let mut cfg = config::load(args.config.as_deref(), overrides)?;
    let workers = config::resolve_workers(args.workers)?;
    // one seed drives every stage; the echoed config shows the values in effect
    cfg.train.seed = cfg.seed;
    cfg.sample.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    cfg.train.workers = workers;
    cfg.sample.workers = workers;
    cfg.eval.workers = workers;
    Ok(Ctx {
        cfg,
        out: args.out.clone(),
        workers,
    })
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let (args, stages): (&RunArgs, &[Stage]) = match &cli.command {
        Command::Describe { robot, json, run } => {
            let path = match robot {
                Some(p) => p.clone(),
                None => context(run, overrides)?
                    .robot_path()
                    .context("describe needs a robot path")?
                    .to_path_buf(),
            };
            return describe::run(&path, *json);
        }
        Command::Datagen(a) => (a, &[Stage::Datagen]),
        Command::Train(a) => (a, &[Stage::Train]),
        Command::Sample(a) => (a, &[Stage::Sample]),
        Command::Refine(a) => (a, &[Stage::Refine]),
        Command::Eval(a) => (a, &[Stage::Eval]),
        Command::All(a) => (a, &Stage::PIPELINE),
    };
    let ctx = context(args, overrides)?;
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("config.toml"), toml::to_string(&ctx.cfg)?)?;
    for &stage in stages {
        ctx.run(stage)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = config::split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

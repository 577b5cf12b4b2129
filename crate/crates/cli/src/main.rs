//! `histoclass`: tiling, stain normalization, cross-validated training and
//! reporting for histopathology patch classification.

mod artifacts;
mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histoclass::par;

use crate::config::{Config, Overrides};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "histoclass", version, about = "Histopathology patch classification pipeline")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, env = "HISTOCLASS_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut slides into patches, apply tissue QC and write the manifest.
    Tile,
    /// Macenko-normalize the tiled patches to the reference profile.
    Normalize {
        /// Use this patch as the reference instead of the configured profile.
        #[arg(long)]
        promote: Option<PathBuf>,
    },
    /// Hold out the test split and assign stratified folds.
    Split,
    /// Pretrain the extractor on the source task.
    Pretrain,
    /// Train one model per fold.
    Train,
    /// Score the fold checkpoints on the test split.
    Evaluate,
    /// Render curves, confusion matrices and ROC plots.
    Report,
    /// Write a synthetic dataset to --out.
    Synth {
        #[arg(value_enum)]
        kind: commands::synth::Kind,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 512)]
        size: u32,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("no config: pass --config or set HISTOCLASS_CONFIG".into()))?;
    let overrides = Overrides { seed: cli.seed, workers: cli.workers, out: cli.out.clone() };
    Config::load(path, &overrides)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth { kind, per_class, size } = &cli.command {
        let out = cli.out.as_ref().ok_or_else(|| CliError::Config("synth needs --out".into()))?;
        let work = || commands::synth::run(*kind, out, *per_class, *size, cli.seed.unwrap_or(0));
        return match cli.workers {
            Some(w) if w > 0 => par::with_workers(w, work),
            _ => work(),
        };
    }
    let cfg = load_config(cli)?;
    let work = || match &cli.command {
        Command::Tile => commands::tile::run(&cfg),
        Command::Normalize { promote } => commands::normalize::run(&cfg, promote.as_deref()),
        Command::Split => commands::train::split(&cfg),
        Command::Pretrain => commands::train::pretrain_command(&cfg),
        Command::Train => commands::train::train(&cfg),
        Command::Evaluate => commands::train::evaluate(&cfg),
        Command::Report => commands::report::run(&cfg),
        Command::Synth { .. } => unreachable!("handled above"),
    };
    if cfg.workers > 0 {
        par::with_workers(cfg.workers, work)
    } else {
        work()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, SeedSources, UsageError};

#[derive(Parser)]
#[command(name = "gla", version, about = "Gaussian-guided latent alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides GLA_SEED and the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if its parent exists.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Alignment-only training on a 2-D preset.
    Synthetic(Common),
    /// Domain adaptation on a labeled shifted task.
    Adapt(Common),
    /// The six alignment variants under one budget and seed.
    Ablation(Common),
    /// Finite-difference check of every loss and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupts the log backward rule; the suite must then fail.
        #[arg(long)]
        negative_control: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Markdown comparison of finished runs.
    Report {
        /// Run directories, or directories holding runs.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let experiment = |command, c: Common| -> anyhow::Result<bool> {
        let seeds = SeedSources::from_env(c.seed);
        let cfg = config::ExperimentConfig::resolve(command, c.config.as_deref(), &seeds, c.out)?;
        let out = cfg.prepare_paths()?;
        match command {
            Command::Synthetic => commands::synthetic(&cfg, &out),
            Command::Adapt => commands::adapt(&cfg, &out),
            Command::Ablation => commands::ablation(&cfg, &out, c.jobs),
        }
        .map(|()| true)
    };
    match cli.command {
        Cmd::Synthetic(c) => experiment(Command::Synthetic, c),
        Cmd::Adapt(c) => experiment(Command::Adapt, c),
        Cmd::Ablation(c) => experiment(Command::Ablation, c),
        Cmd::Gradcheck {
            seeds,
            negative_control,
            out,
        } => commands::gradcheck(seeds, negative_control, out.as_deref()),
        Cmd::Report { dirs, out } => report::run(&dirs, out.as_deref()).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

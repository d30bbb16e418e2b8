//! `mixlr`: fit, infer, test, simulate and build networks from the command line.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on numerical failure.
//! Every run that gets as far as knowing its output directory leaves a
//! `manifest.json` there, whether or not it succeeded.

mod commands;
mod config;
mod error;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Mode;
use error::CliError;
use manifest::Run;

#[derive(Parser)]
#[command(name = "mixlr", version, about = "High-dimensional mixed linear regression: estimation, inference, FDR testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all logical processors).
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for outputs and the run manifest; created if missing.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize and run EM on a dataset; writes fit.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Debiased estimates and confidence intervals from a fit.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Max-statistic FDR test of `β₁ⱼ = β₂ⱼ = 0` for every coordinate.
    Multitest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo experiments over a grid of synthetic designs.
    Simulate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Node-wise dependence network of an expression matrix.
    Network {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit { .. } => "fit",
            Command::Infer { .. } => "infer",
            Command::Multitest { .. } => "multitest",
            Command::Simulate { .. } => "simulate",
            Command::Network { .. } => "network",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit { common, .. }
            | Command::Infer { common, .. }
            | Command::Multitest { common, .. }
            | Command::Simulate { common, .. }
            | Command::Network { common, .. } => common,
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Fit { seed, .. } | Command::Simulate { seed, .. } | Command::Network { seed, .. } => *seed,
            Command::Infer { .. } | Command::Multitest { .. } => None,
        }
    }
}

fn execute(run: &mut Run, cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::input(format!("--threads: {e}")))?;
    }
    let cfg = commands::load_config(run, common.config.as_deref())?;
    match cmd {
        Command::Fit { data, seed, .. } => commands::fit(run, &cfg, data, *seed),
        Command::Infer { data, fit, alpha, .. } => commands::infer(run, &cfg, data, fit, *alpha),
        Command::Multitest { data, fit, alpha, .. } => commands::multitest(run, &cfg, data, fit, *alpha),
        Command::Simulate { mode, grid, seed, alpha, .. } => commands::simulate(run, &cfg, *mode, grid, *seed, *alpha),
        Command::Network { data, seed, alpha, .. } => commands::network(run, &cfg, data, *seed, *alpha),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cmd = &cli.command;
    let out_dir = cmd.common().out_dir.clone();
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return ExitCode::from(1);
    }
    let mut run = Run::new(cmd.name(), out_dir, cmd.seed());
    let result = execute(&mut run, cmd);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(run.finish(result))
}

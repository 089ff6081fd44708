use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqg_bench::commands::{self, Context};
use lqg_bench::config::Setting;
use lqg_bench::error::Result;

/// Model-based and learned LQG controllers under model mismatch.
#[derive(Debug, Parser)]
#[command(name = "lqg-bench", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// matched, mismatch-f or mismatch-h.
    #[arg(long, global = true)]
    setting: Option<Setting>,
    /// Comma-separated noise levels in dB; an empty list runs nothing.
    #[arg(long, global = true, allow_hyphen_values = true, value_parser = parse_db_list)]
    noise_db: Option<DbList>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out each controller once and export trajectories.
    Simulate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the learned controller for one setting and noise level.
    Train,
    /// Evaluate a trained checkpoint over the test seeds.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the closed-loop gradient.
    GradCheck,
    /// Train and evaluate every setting and noise level.
    Reproduce,
    /// Single-trajectory comparison from the configured initial state.
    Demo {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
struct DbList(Vec<f64>);

fn parse_db_list(s: &str) -> std::result::Result<DbList, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(DbList)
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Context::load(
        cli.config.as_deref(),
        cli.out,
        cli.seed,
        cli.setting,
        cli.noise_db.map(|l| l.0),
        cli.quiet,
    )?;
    match cli.command {
        Command::Simulate { checkpoint } => commands::simulate(&ctx, checkpoint.as_deref()),
        Command::Train => commands::train(&ctx),
        Command::Evaluate { checkpoint } => commands::evaluate(&ctx, &checkpoint).map(drop),
        Command::GradCheck => commands::grad_check_command(&ctx).map(drop),
        Command::Reproduce => commands::reproduce(&ctx).map(drop),
        Command::Demo { checkpoint } => commands::demo(&ctx, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

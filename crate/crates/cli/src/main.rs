use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use schedlab_core::harness::{load_scenarios, run_batch, Command, RunOptions};
use schedlab_core::Error;

/// Desk-scale noise-schedule and DDIM inversion laboratory.
#[derive(Parser)]
#[command(name = "schedlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tabulate ᾱ, β, SNR and logSNR on a grid.
    ScheduleDump(Args),
    /// Sample the dx/dt coefficients on a geometric grid.
    SingularityScan(Args),
    /// Invert and reconstruct samples from the source model.
    Roundtrip(Args),
    /// Invert under the source model and regenerate under the target.
    EditSim(Args),
    /// Run the scenario's sweep axis.
    Sweep(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Scenario file (one JSON object or an array).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; each scenario writes to a subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid points for schedule-dump, samples for singularity-scan.
    #[arg(long)]
    grid: Option<usize>,
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("SCHEDLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::validation(format!("SCHEDLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::validation(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let (command, args) = match cli.command {
        Cmd::ScheduleDump(a) => (Command::ScheduleDump, a),
        Cmd::SingularityScan(a) => (Command::SingularityScan, a),
        Cmd::Roundtrip(a) => (Command::Roundtrip, a),
        Cmd::EditSim(a) => (Command::EditSim, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    let scenarios = load_scenarios(&args.config)?;
    let opts = RunOptions {
        out: args.out,
        seed: args.seed,
        grid: args.grid,
    };
    for out in run_batch(command, &scenarios, &opts)? {
        println!("{}: wrote {} files to {}", out.name, out.files.len(), out.dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("schedlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `mstrans`: multi-scale transformer experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numeric failure (diverged training, failed gradient checks).

mod bench;
mod classify;
mod gradcheck_cmd;
mod manifest;
mod mirrored;
mod plan;
mod probe_cmd;

use clap::{Parser, Subcommand};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mstrans", version, about = "Multi-scale transformer encoders: experiments, planning, probing")]
struct Cli {
    /// Bound internal parallelism (default: all cores). Results do not
    /// depend on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer head allocations for given scale candidates.
    Plan(plan::Args),
    /// Run the mirrored-summation benchmark grid.
    Mirrored(mirrored::Args),
    /// Train a text classifier from TSV splits.
    Classify(classify::Args),
    /// Analyze attention distances of a checkpoint or an attention dump.
    Probe(probe_cmd::Args),
    /// Verify analytic gradients against finite differences.
    Gradcheck(gradcheck_cmd::Args),
    /// Time forward passes across sequence lengths.
    Bench(bench::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Plan(args) => plan::run(args),
        Command::Mirrored(args) => mirrored::run(args),
        Command::Classify(args) => classify::run(args),
        Command::Probe(args) => probe_cmd::run(args),
        Command::Gradcheck(args) => gradcheck_cmd::run(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Numeric/runtime failures exit 2; configuration and input problems exit 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mstrans::Error>() {
        Some(mstrans::Error::Numeric(_)) => 2,
        Some(_) => 1,
        None => 2,
    }
}

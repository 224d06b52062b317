//! `framecal` — detect a chirality or time-arrow mismatch between two
//! distant reference frames from shared entangled spin-pair statistics.

mod commands;
mod report;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{cmd_serve, cmd_simulate, cmd_sweep, cmd_witness};

/// Exit status contract, shared by all commands: 0 when no
/// incompatibility was established, 2 when the frames are incompatible,
/// 1 on any error.
#[derive(Debug, Parser)]
#[command(name = "framecal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact witness check: apply one parity/time map to a state and
    /// inspect the candidate's spectrum.
    Witness(commands::WitnessArgs),
    /// Run a full calibration session in-process.
    Simulate(commands::SimulateArgs),
    /// Run one role of a networked session over TCP.
    Serve(commands::ServeArgs),
    /// Grid detection rates over werner states and sample sizes; emits CSV.
    Sweep(commands::SweepArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Witness(args) => cmd_witness(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

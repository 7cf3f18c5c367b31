use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use quicknet_cli::commands::{self, EvalArgs, SweepArgs, TrainArgs};
use quicknet_cli::report::{self, ReportArgs};
use quicknet_cli::CliResult;

/// Cascaded block-wise training of early-exit networks.
#[derive(Parser)]
#[command(name = "quicknet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a cascade (or the end-to-end baseline) and write a run directory.
    Train(TrainArgs),
    /// Early-exit metrics of a trained run at one threshold.
    Eval(EvalArgs),
    /// Accuracy and mean FLOPs over a threshold list, for both exit modes.
    Sweep(SweepArgs),
    /// Per-block tables from one or more run manifests.
    Report(ReportArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let m = commands::train(&args)?;
            eprintln!(
                "trained {} block(s); training FLOPs {}; test accuracy {}",
                m.trained_blocks,
                m.metrics.training_flops,
                m.metrics.test_accuracy.map_or_else(|| "n/a".into(), |a| format!("{:.4}", a))
            );
        }
        Command::Eval(args) => {
            let r = commands::eval(&args)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Command::Sweep(args) => {
            commands::sweep(&args)?;
        }
        Command::Report(args) => {
            for p in report::report(&args)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error[{}] {}", e.category(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

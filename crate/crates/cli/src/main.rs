use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fppg_cli::{run_pipeline, Overrides, Stage};

/// Dynamic emission tomography experiments: simulate, reconstruct, analyze.
#[derive(Debug, Parser)]
#[command(name = "fppg", version)]
struct Args {
    /// Stage to run: simulate, sweep, recon, analyze, fit, report or all.
    #[arg(value_name = "STAGE")]
    command: Option<Stage>,
    /// Run configuration file.
    #[arg(long, short, value_name = "PATH")]
    config: PathBuf,
    /// Same as the positional stage.
    #[arg(long, value_name = "NAME", conflicts_with = "command")]
    stage: Option<Stage>,
    #[arg(long, value_name = "N")]
    realizations: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "T")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stage = args.command.or(args.stage).unwrap_or(Stage::All);
    let overrides = Overrides {
        realizations: args.realizations,
        seed: args.seed,
        out: args.out,
        threads: args.threads,
    };
    match run_pipeline(&args.config, stage, &overrides) {
        Ok(summary) => {
            for (s, secs) in summary.stages {
                eprintln!("{s}: {secs:.1} s");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

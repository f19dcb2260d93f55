use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smc::cli;
use smc::tensor::Fault;

#[derive(Parser)]
#[command(
    name = "smc",
    about = "Multi-channel self-distillation training toolkit",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate every operation's gradients against finite differences.
    Gradcheck {
        /// Corrupt a backward rule to prove the checker catches it.
        #[arg(long)]
        fault: Option<Fault>,
    },
    /// Summarize run logs and optionally plot accuracy curves.
    Report {
        logs: Vec<PathBuf>,
        /// Write an SVG of validation accuracy vs epoch.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Emit the label-corruption mask a config's noise spec would apply.
    InjectNoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // SMC_THREADS caps the worker pool; unset means all available cores.
    if let Ok(value) = std::env::var("SMC_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("SMC_THREADS must be a positive integer, got {value:?}");
                return ExitCode::from(2);
            }
        }
    }

    let args = Args::parse();
    let result = match args.command {
        Command::Train { config, seed, out } => cli::cmd_train(&config, seed, out).map(|_| 0),
        Command::Gradcheck { fault } => cli::cmd_gradcheck(fault),
        Command::Report { logs, svg } => cli::cmd_report(&logs, svg.as_deref()).map(|_| 0),
        Command::InjectNoise { config, out } => cli::cmd_inject_noise(&config, &out).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layerserve::commands::{self, CommandError};

#[derive(Parser)]
#[command(name = "layerserve", version, about = "Simulate layer-wise LLM inference serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its output files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario without and with autoscaling and compare the two.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-layer latency report of a finished run.
    Report {
        /// Run directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command, cli.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command, quiet: bool) -> Result<(), CommandError> {
    match command {
        Command::Run { config, seed, out } => {
            let r = commands::run(&config, seed, out.as_deref())?;
            if !quiet {
                let m = &r.manifest;
                println!(
                    "{}: admitted {} completed {} in-system {} events {} -> {}",
                    m.scenario,
                    m.admitted,
                    m.completed,
                    m.in_system,
                    m.events_fired,
                    r.out_dir.display()
                );
            }
        }
        Command::Compare { config, seed, out } => {
            let r = commands::compare(&config, seed, out.as_deref())?;
            if !quiet {
                let s = &r.summary;
                println!(
                    "baseline:  mean e2e {:.3} s  p95 {:.3} s  throughput {:.3} qps",
                    s.baseline.mean_e2e_s, s.baseline.p95_e2e_s, s.baseline.throughput_qps
                );
                println!(
                    "treatment: mean e2e {:.3} s  p95 {:.3} s  throughput {:.3} qps",
                    s.treatment.mean_e2e_s, s.treatment.p95_e2e_s, s.treatment.throughput_qps
                );
                println!(
                    "latency ratio {:.3}  throughput ratio {:.3} -> {}",
                    s.latency_ratio,
                    s.throughput_ratio,
                    r.out_dir.display()
                );
            }
        }
        Command::Report { out } => {
            let r = commands::report(&out)?;
            if !quiet {
                print!("{}", r.text);
            }
        }
        Command::Validate { config } => {
            let c = commands::validate(&config)?;
            if !quiet {
                println!("{}: ok", c.name);
            }
        }
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icl_cli::diversity::{run_diversity, DiversityConfig};
use icl_cli::verify::oracle_suite;
use icl_cli::{run_experiment, with_threads, ExperimentConfig};

#[derive(Parser)]
#[command(name = "icl", about = "In-context learning sweeps for linear-attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write results.csv, config.json, plot.svg and theta files.
    Run { config: PathBuf },
    /// Closed-form versus Monte-Carlo oracle suite.
    Verify,
    /// Diversity verdict and distance surrogate for a train/test pair.
    Diversity { config: PathBuf },
}

fn threads() -> Option<usize> {
    std::env::var("ICL_THREADS").ok().and_then(|v| v.parse().ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = with_threads(threads(), || -> icl_cli::Result<bool> {
        match cli.command {
            Command::Run { config } => {
                let cfg = ExperimentConfig::load(&config)?;
                let result = run_experiment(&cfg)?;
                for t in &result.targets {
                    match t.slope {
                        Some(s) => println!("{}: slope {:.3} ± {:.3}", t.label, s.slope, s.std_error),
                        None => println!("{}: too few points for a slope", t.label),
                    }
                }
                println!("wrote {}", cfg.output_dir().display());
                Ok(true)
            }
            Command::Verify => {
                let reports = oracle_suite()?;
                for r in &reports {
                    println!("{}", r.line());
                }
                Ok(reports.iter().all(|r| r.passed))
            }
            Command::Diversity { config } => {
                let cfg = DiversityConfig::load(&config)?;
                let out = run_diversity(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&out).expect("json"));
                Ok(true)
            }
        }
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

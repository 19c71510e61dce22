use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hetnet::experiment::{run_experiment, validate_instance, ExperimentSpec};

#[derive(Parser)]
#[command(name = "hetnet", version, about = "Certified blank-resource / user-association optimizer and deployment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded Monte-Carlo experiment and write CSVs, dumps, and a manifest.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the master RNG seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of trials per sweep point.
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these schemes (repeatable); default is the config's list.
        #[arg(long)]
        scheme: Vec<String>,
    },
    /// Re-certify a stored solution dump: KKT residuals and structural bounds.
    Validate {
        /// Solution dump produced by `run`.
        #[arg(long)]
        dump: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            trials,
            out,
            scheme,
        } => {
            let mut spec = match ExperimentSpec::from_path(&config) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            if let Some(t) = trials {
                spec.trials = t;
            }
            if !scheme.is_empty() {
                spec.schemes = scheme;
            }
            match run_experiment(&spec, &out, seed) {
                Ok(summary) => {
                    println!(
                        "completed {} trials ({} failed); outputs in {}",
                        summary.total_trials,
                        summary.failed_trials,
                        summary.out_dir.display()
                    );
                    if summary.excess_failures() {
                        eprintln!("error: more than 10% of trials failed to solve");
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Validate { dump } => match validate_instance(&dump) {
            Ok(report) => {
                let mut ok = true;
                for (name, pass) in &report.checks {
                    println!("check {name}: {}", if *pass { "PASS" } else { "FAIL" });
                    ok &= *pass;
                }
                if ok {
                    println!("all checks passed");
                    ExitCode::SUCCESS
                } else {
                    eprintln!("error: validation failed");
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enopt_cli::{compare, emit_plots, run, validate_deck, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "aml-enopt", version, about = "Ensemble optimization with adaptive neural-network surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's worker count (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Baseline run directory for speedup columns.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Compare a candidate run against a baseline run.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a deck file and simulate its initial guess.
    ValidateDeck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write plot-ready tables for finished runs.
    EmitPlots {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, seed, workers, out, baseline } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(o) = out {
                cfg.out_dir = std::path::absolute(&o).unwrap_or(o);
            }
            if let Some(b) = baseline {
                cfg.baseline = Some(std::path::absolute(&b).unwrap_or(b));
            }
            let outcome = run(&cfg)?;
            print!("{}", enopt_cli::artifacts::summary_table(std::slice::from_ref(&outcome.summary)));
            if !outcome.certification.passed {
                for f in &outcome.certification.failures {
                    eprintln!("certification: {f}");
                }
                return Err(CliError::Config("trace failed certification".into()));
            }
            println!("artifacts in {}", outcome.dir.display());
        }
        Command::Compare { baseline, candidate, out } => {
            let report = compare(&baseline, &candidate)?.report();
            print!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, &report).map_err(|source| CliError::Io { path, source })?;
            }
        }
        Command::ValidateDeck { config } => print!("{}", validate_deck(&config)?),
        Command::EmitPlots { runs, out } => {
            for p in emit_plots(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

//! Command-line front end for emulator-based likelihood-free inference.
//!
//! Exit codes: 0 success, 2 configuration error, 3 simulator failure,
//! 4 numerical failure, 1 anything else (I/O, malformed archive).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use synlik::acquisition::Rule;
use synlik::runner::{self, RunConfig, RunOptions};
use synlik::{Error, Result};

#[derive(Parser)]
#[command(name = "synlik", version, about = "Active-learning synthetic likelihoods with neural emulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the acquire → simulate → train loop and write a run archive.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Archive directory (default: the config's output dir, else runs/<experiment>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_rule)]
        rule: Option<Rule>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Stop cleanly after this round; continue later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Sample the posterior from an archive's latest ensemble.
    SamplePosterior {
        /// Archive directory.
        #[arg(long)]
        out: PathBuf,
        /// Observation as comma-separated values (default: the configured one).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        observed: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample CSV path (default: <archive>/posterior.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute the metrics table from an archive's ensemble snapshots.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics of several archives into plot-ready tables.
    Export {
        /// Destination directory for metrics.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        archives: Vec<PathBuf>,
    },
    /// Run one simulation and print the output as JSON.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        theta: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_rule(s: &str) -> std::result::Result<Rule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: &Path, seed: Option<u64>, rule: Option<Rule>, rounds: Option<usize>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(rule) = rule {
        config.acquisition.rule = rule;
    }
    if let Some(rounds) = rounds {
        config.rounds = rounds;
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            rule,
            rounds,
            stop_after,
            resume,
        } => {
            let run_config = load_config(&config, seed, rule, rounds)?;
            let out = out.unwrap_or_else(|| match &run_config.output.dir {
                Some(dir) => PathBuf::from(dir),
                None => Path::new("runs").join(run_config.run_id()),
            });
            let summary = runner::cmd_run(
                &run_config,
                config.parent(),
                &out,
                &RunOptions { stop_after, resume },
            )?;
            println!(
                "{}: round {} complete, {} records ({:?})",
                summary.archive.display(),
                summary.completed_round,
                summary.records,
                summary.status
            );
            if let Some(last) = summary.metrics.last() {
                println!("last metric: {} = {} at round {}", last.metric, last.value, last.round);
            }
        }
        Command::SamplePosterior {
            out,
            observed,
            seed,
            output,
        } => {
            let set = runner::cmd_sample_posterior(&out, observed, seed, output.as_deref())?;
            let rates = set.acceptance_rates();
            let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
            println!(
                "{} samples from {} chains, mean acceptance {mean_rate:.3}",
                set.len(),
                set.chains.len()
            );
            for w in &set.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Evaluate { out } => {
            let rows = runner::cmd_evaluate(&out)?;
            println!("{} metric rows written to {}", rows.len(), out.join("metrics.csv").display());
        }
        Command::Export { out, archives } => {
            runner::cmd_export(&archives, &out)?;
            println!("exported {} archives to {}", archives.len(), out.display());
        }
        Command::Simulate { config, theta, seed } => {
            let run_config = RunConfig::load(&config)?;
            let x = runner::cmd_simulate(&run_config, config.parent(), &theta, seed)?;
            println!("{}", serde_json::to_string(&x)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lws_core::experiment::{
    emit_bench, emit_frequency, emit_profiles, emit_reinit, emit_results, parse_seeds, run_bench,
    run_experiment, run_frequency_experiment, run_profile_experiment, run_reinit_experiment,
    Experiment, ExperimentConfig,
};
use lws_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "lws",
    version,
    about = "Layer-wise sparse training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Directory for result files
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,

    /// Seeds to run, e.g. `1,2,3` or `1..5`; replaces the config's list
    #[arg(long, global = true)]
    seeds: Option<String>,

    /// Config override `key=value`; may be repeated
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train under the configured layer-selection policy
    Train { config: PathBuf },
    /// Train, then sweep active and lazy re-initialization
    ReinitSweep { config: PathBuf },
    /// Train and count per-epoch active parameters of the full-batch gradient
    ActiveFreq { config: PathBuf },
    /// Train and export sorted gradient magnitudes at chosen epochs
    GradProfile { config: PathBuf },
    /// Compare backward time of the policy against full training
    BenchBackward { config: PathBuf },
}

impl Command {
    fn config(&self) -> &Path {
        match self {
            Command::Train { config }
            | Command::ReinitSweep { config }
            | Command::ActiveFreq { config }
            | Command::GradProfile { config }
            | Command::BenchBackward { config } => config,
        }
    }
}

fn load(cli: &Cli) -> lws_core::Result<Experiment> {
    let mut overrides = cli.overrides.clone();
    if let Some(seeds) = &cli.seeds {
        parse_seeds(seeds)?;
        overrides.push(format!("seeds={seeds}"));
    }
    let config = ExperimentConfig::from_file_with(cli.command.config(), &overrides)?;
    Experiment::prepare(config)
}

fn run(cli: &Cli, exp: &Experiment) -> lws_core::Result<()> {
    let out = &cli.out_dir;
    let written = match &cli.command {
        Command::Train { .. } => {
            let records = run_experiment(exp)?;
            for r in &records {
                eprintln!(
                    "seed {}: test acc {:.4}, backward {:.2}s, total {:.2}s",
                    r.seed, r.final_test.accuracy, r.total_backward_time_s, r.total_time_s
                );
            }
            emit_results(exp, &records, out)?
        }
        Command::ReinitSweep { .. } => {
            let result = run_reinit_experiment(exp)?;
            emit_reinit(exp, &result.rows, &result.records, out)?
        }
        Command::ActiveFreq { .. } => {
            let result = run_frequency_experiment(exp)?;
            emit_frequency(exp, &result, out)?
        }
        Command::GradProfile { .. } => {
            let result = run_profile_experiment(exp)?;
            emit_profiles(exp, &result, out)?
        }
        Command::BenchBackward { .. } => {
            let result = run_bench(exp)?;
            eprintln!("backward time ratio vs full: {:.4}", result.time_ratio());
            emit_bench(exp, &result, out)?
        }
    };
    eprintln!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exp = match load(&cli) {
        Ok(exp) => exp,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &exp) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feddes::harness::{render_summaries, run_experiment, run_sweep, ExperimentConfig, RunOptions};
use feddes::Error;

#[derive(Parser)]
#[command(name = "feddes", version, about = "Federated dynamic ensemble selection experiments")]
struct Cli {
    /// -v for progress, -vv for debug output and per-decision dumps.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,

    /// Overrides the config's seed.
    #[arg(short, long)]
    seed: Option<u64>,

    /// Worker threads (0 = one per core).
    #[arg(short, long, default_value_t = 1)]
    workers: usize,

    /// Overrides the config's output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,

    /// Recompute every stage even when caches exist.
    #[arg(long)]
    fresh: bool,

    /// Write decisions.csv.
    #[arg(long)]
    dump_decisions: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run the config once per seed and aggregate.
    Sweep {
        #[command(flatten)]
        run: RunArgs,

        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Print the summaries in a run or sweep directory.
    Report {
        /// Run directory, sweep directory or summary.json.
        path: PathBuf,
    },
}

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, RunOptions), Error> {
    let mut config = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        other => other,
    })?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok((
        config,
        RunOptions {
            workers: args.workers,
            output_dir: args.output_dir.clone(),
            dump_decisions: args.dump_decisions,
            fresh: args.fresh,
        },
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => load(&args).and_then(|(config, mut options)| {
            options.dump_decisions |= cli.verbose >= 2;
            let outcome = run_experiment(&config, &options)?;
            print!("{}", render_summaries(&outcome.output_dir)?);
            Ok(())
        }),
        Command::Sweep { run, seeds } => load(&run).and_then(|(config, mut options)| {
            options.dump_decisions |= cli.verbose >= 2;
            let (summary, _) = run_sweep(&config, &seeds, &options)?;
            print!("{}", summary.to_csv());
            Ok(())
        }),
        Command::Report { path } => render_summaries(&path).map(|text| print!("{text}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

//! `skewsim`: partition data, train one configuration (or a grid of them),
//! tune a synchronization knob online, and compare finished runs.

mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "skewsim", version, about = "Decentralized training over label-skewed partitions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the partition plan and its per-partition label shares.
    Partition(ConfigArgs),
    /// Train one configuration per grid point.
    Train(TrainArgs),
    /// Train with model traveling and online tuning of the algorithm's knob.
    Tune(TuneArgs),
    /// Join finished runs into one comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (flat JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(short, long)]
    out: PathBuf,
    /// Override one config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    sampling_seed: Option<u64>,
    /// Print nothing on success.
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Expand `key=v1,v2,...` into one run per value, each in its own
    /// subdirectory. Repeated flags form the cartesian product.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// Summary JSON of the BSP run to compute communication savings against.
    #[arg(long)]
    baseline_ledger: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Controller config (JSON); the flags below override it.
    #[arg(long)]
    controller: Option<PathBuf>,
    #[arg(long)]
    lambda_al: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    sigma_al: Option<f64>,
    /// Minibatches between travel events.
    #[arg(long)]
    travel_period: Option<usize>,
    /// hill_climb, stochastic_hill_climb or simulated_annealing.
    #[arg(long)]
    tuner: Option<String>,
    /// Candidate knob values, conservative first, e.g. `0.02,0.05,0.1`.
    #[arg(long, value_delimiter = ',')]
    theta_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Summary JSON files or run directories containing `summary.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Run to compare against; defaults to the first input.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Also write `report.csv` and `report.txt` here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Partition(a) => run::partition(&a).map(|_| false),
        Command::Train(a) => run::train(&a.run),
        Command::Tune(a) => run::tune(&a),
        Command::Report(a) => report::report(&a).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("training diverged");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use capinstall::model::Scheme;
use capinstall_cli::{run, Command, Report, RunOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capinstall", version, about = "Capacity installation under jump-driven supply and demand")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML or JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Training scale in (0, 1]
    #[arg(long, global = true)]
    scale: Option<f64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// euler or exact-latent
    #[arg(long, global = true)]
    scheme: Option<Scheme>,

    /// Monte Carlo path count of the command
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Threshold level A
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate sample paths under a threshold rule
    Simulate,
    /// Monte Carlo cost of a threshold rule
    McOracle,
    /// Value a threshold rule with the BSDE solver
    SolveBsde,
    /// Grid search for the best threshold
    SelectThreshold {
        /// Value thresholds by Monte Carlo instead of the BSDE solver
        #[arg(long)]
        oracle_mode: bool,
    },
    /// Train the feedback policy network
    TrainPolicy,
    /// Evaluate a saved policy network
    EvaluatePolicy {
        /// Policy parameter file (defaults to the train-policy output)
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Compare the threshold optimum with the feedback policy
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut opts = RunOptions {
        config: cli.config,
        seed: cli.seed,
        scale: cli.scale,
        out: cli.out,
        scheme: cli.scheme,
        paths: cli.paths,
        threshold: cli.threshold,
        threads: cli.threads,
        ..Default::default()
    };
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::McOracle => Command::McOracle,
        Cmd::SolveBsde => Command::SolveBsde,
        Cmd::SelectThreshold { oracle_mode } => {
            opts.oracle_mode = oracle_mode;
            Command::SelectThreshold
        }
        Cmd::TrainPolicy => Command::TrainPolicy,
        Cmd::EvaluatePolicy { policy } => {
            opts.policy = policy;
            Command::EvaluatePolicy
        }
        Cmd::Report => Command::Report,
    };
    match run(command, &opts) {
        Ok(manifest) => {
            if command == Command::Report {
                let out = manifest.config["out_dir"].as_str().map(PathBuf::from).unwrap_or_default();
                match Report::from_dir(&out) {
                    Ok(report) => print!("{}", report.table()),
                    Err(e) => eprintln!("error: {e:#}"),
                }
            } else {
                for (key, value) in &manifest.headline {
                    println!("{key} = {value}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

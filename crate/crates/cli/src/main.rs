//! `fpdiff` command-line pipeline: reference data, training, sampling,
//! simulation, evaluation and figures.

mod commands;
mod grid;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "fpdiff", version, about = "Energy-based diffusion models with Fokker-Planck regularization")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reference Langevin data on an analytic potential.
    GenData(GenData),
    /// Train a model from a preset and optional config file.
    Train(Train),
    /// Independent samples from the reverse SDE.
    Sample(Sample),
    /// Langevin simulation driven by the model score.
    Simulate(Simulate),
    /// Compare samples with a reference set.
    Evaluate(Evaluate),
    /// Mean Fokker-Planck residual over a grid of diffusion times.
    FpError(FpError),
    /// Free energy -log p on a regular 2D grid.
    EnergyGrid(EnergyGrid),
    /// Free-energy heatmap from a grid or a sample histogram.
    Plot(Plot),
    /// Re-run the command recorded in a manifest and check its outputs.
    Replay(Replay),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, default_value = "mueller-brown")]
    pub system: String,
    #[arg(long, default_value_t = 5_000_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub save_every: usize,
    #[arg(long, default_value_t = 23.0)]
    pub kbt: f64,
    #[arg(long, default_value_t = 0.005)]
    pub dt: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mass: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    /// `key = value` overrides of the preset (see README).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// diffusion, mixture, fp or both.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Sample {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = fpdiff::T_EPS)]
    pub t_end: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Simulate {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference set the chains start from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = fpdiff::T_EPS)]
    pub t_eval: f64,
    #[arg(long, default_value_t = 100)]
    pub chains: usize,
    #[arg(long, default_value_t = 50_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub save_every: usize,
    #[arg(long, default_value_t = 0.005)]
    pub dt: f64,
    #[arg(long, default_value_t = 23.0)]
    pub kbt: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mass: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub samples: PathBuf,
    /// Total histogram cells; must be a perfect square (64 gives 8 x 8).
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
    /// `auto` (reference range plus margin) or `x_min:x_max:y_min:y_max`.
    #[arg(long, default_value = "auto")]
    pub extent: String,
    #[arg(long, default_value = "js,pmf,w1")]
    pub metrics: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FpError {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training data in physical coordinates.
    #[arg(long)]
    pub data: PathBuf,
    /// `lo:hi:n`, log-spaced.
    #[arg(long, default_value = "1e-5:0.1:50")]
    pub t_grid: String,
    #[arg(long, default_value_t = 1000)]
    pub n_eval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnergyGrid {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = fpdiff::T_EPS)]
    pub t: f64,
    /// `auto` (training mean +- 3.5 std) or `x_min:x_max:y_min:y_max`.
    #[arg(long, default_value = "auto")]
    pub extent: String,
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "input")]
pub struct PlotInput {
    /// Grid written by `energy-grid`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Dataset to histogram.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Plot {
    #[command(flatten)]
    pub input: PlotInput,
    /// Bins per axis for `--hist`.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    /// Output PPM image; the plotted grid is written next to it as `.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Replay {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, args),
        Command::Train(a) => commands::train(&a, threads, args),
        Command::Sample(a) => commands::sample(&a, threads, args),
        Command::Simulate(a) => commands::simulate(&a, args),
        Command::Evaluate(a) => commands::evaluate(&a, args),
        Command::FpError(a) => commands::fp_error(&a, args),
        Command::EnergyGrid(a) => commands::energy_grid(&a, args),
        Command::Plot(a) => commands::plot(&a, args),
        Command::Replay(a) => commands::replay(&a),
    }
}

/// Parses and runs a recorded argument list (without the program name).
fn run_args(args: &[String]) -> Result<(), CliError> {
    let mut argv = vec!["fpdiff".to_string()];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(CliError::Usage("a manifest cannot record a replay".into()));
    }
    run(cli, args.to_vec())
}

//! qdtune: charge-stability simulation, synthetic-noise datasets, state and
//! quality classifiers, and the gated autotuning loop, behind one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod evaluate;
mod generate;
mod io;
mod maps;
mod quality;
mod reproduce;
mod train;
mod tune_cmd;

#[derive(Parser)]
#[command(
    name = "qdtune",
    version,
    about = "Simulated double-dot autotuning toolkit",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads for parallel sections; defaults to all cores.
    /// The QDTUNE_WORKERS environment variable sets the same knob.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate(generate::GenerateArgs),
    /// Train a device-state ensemble.
    TrainDse(train::TrainDseArgs),
    /// Score a checkpoint ensemble on a dataset split.
    Evaluate(evaluate::EvaluateArgs),
    /// Fit MAE-vs-noise curves and calibrate quality thresholds.
    CalibrateDqc(quality::CalibrateArgs),
    /// Train the data-quality gate.
    TrainDqc(train::TrainDqcArgs),
    /// Check that predicted quality orders state-estimator performance.
    ValidateDqc(quality::ValidateArgs),
    /// Run the gated autotuning loop on the simulated device.
    Tune(tune_cmd::TuneArgs),
    /// Render a map bundle into portable graymap/pixmap images.
    RenderMaps(maps::RenderArgs),
    /// Run the whole pipeline from one seed and emit the summary report.
    Reproduce(reproduce::ReproduceArgs),
}

fn init_workers(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("QDTUNE_WORKERS").ok().and_then(|s| s.parse().ok())
    });
    if let Some(n) = n {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_workers(cli.workers);
    let result = match &cli.command {
        Command::Generate(args) => generate::run(args),
        Command::TrainDse(args) => train::run_dse(args),
        Command::Evaluate(args) => evaluate::run(args),
        Command::CalibrateDqc(args) => quality::run_calibrate(args),
        Command::TrainDqc(args) => train::run_dqc(args),
        Command::ValidateDqc(args) => quality::run_validate(args),
        Command::Tune(args) => tune_cmd::run(args),
        Command::RenderMaps(args) => maps::run(args),
        Command::Reproduce(args) => reproduce::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! `qdtune train-dse` and `qdtune train-dqc`: ensemble training with one
//! checkpoint directory per model plus a shared history file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use qdtune_core::config::TrainSection;
use qdtune_core::dataset::Dataset;
use qdtune_core::dqc::train_dqc;
use qdtune_core::dse::train_ensemble;
use qdtune_core::nn::{Network, NetworkSpec, TrainHistory};
use qdtune_core::NetScalar;

use crate::io;

#[derive(Serialize)]
struct DseManifestConfig<'a> {
    dataset: String,
    arch: &'a str,
    models: usize,
    master_seed: u64,
    clip: bool,
    train: TrainSection,
}

#[derive(clap::Args)]
pub struct TrainDseArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Network architecture.
    #[arg(long, value_parser = ["noiseless", "noisy"])]
    pub arch: String,
    /// Ensemble size.
    #[arg(long, default_value_t = 5)]
    pub models: usize,
    /// Master seed; each model derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Percentile-clip gradient images before standardization.
    #[arg(long)]
    pub clip: bool,
    /// Checkpoint output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the embedded defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn spec_for_arch(arch: &str) -> Result<NetworkSpec> {
    match arch {
        "noiseless" => Ok(NetworkSpec::noiseless_dse()),
        "noisy" => Ok(NetworkSpec::noisy_dse()),
        other => bail!("unknown architecture '{other}'; expected noiseless or noisy"),
    }
}

/// Shared by the CLI handler and `reproduce`.
pub fn train_dse_ensemble(
    ds: &Dataset,
    spec: &NetworkSpec,
    models: usize,
    seed: u64,
    clip: bool,
    section: TrainSection,
    out: &Path,
) -> Result<(Vec<Network<NetScalar>>, Vec<TrainHistory>)> {
    let cfg = section.config(seed);
    let (nets, histories) = train_ensemble::<NetScalar>(spec, ds, clip, models, seed, &cfg)?;
    io::save_ensemble(out, &nets)?;
    io::write_json(&out.join("history.json"), &histories)?;
    Ok((nets, histories))
}

pub fn run_dse(args: &TrainDseArgs) -> Result<()> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let spec = spec_for_arch(&args.arch)?;
    let ds = io::open_dataset(&args.dataset)?;

    let guard = io::RunGuard::begin(&args.out)?;
    let (nets, histories) = train_dse_ensemble(
        &ds,
        &spec,
        args.models,
        args.seed,
        args.clip,
        defaults.training.dse,
        &args.out,
    )?;
    io::write_run_manifest(
        &args.out,
        "train-dse",
        DseManifestConfig {
            dataset: args.dataset.display().to_string(),
            arch: &args.arch,
            models: args.models,
            master_seed: args.seed,
            clip: args.clip,
            train: defaults.training.dse,
        },
    )?;
    guard.finish()?;

    for (i, h) in histories.iter().enumerate() {
        let last = h.epochs.last().expect("training always logs epochs");
        println!(
            "model-{i:03}: {} epochs, val accuracy {:.3}, val loss {:.4}",
            h.epochs.len(),
            last.val_accuracy,
            last.val_loss
        );
    }
    println!("saved {} {} checkpoints to {}", nets.len(), spec.name, args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct DqcManifestConfig {
    dataset: String,
    models: usize,
    master_seed: u64,
    train: TrainSection,
}

#[derive(Serialize)]
struct DqcHistory<'a> {
    histories: &'a [TrainHistory],
    class_fractions: [f64; 3],
    warnings: &'a [String],
}

#[derive(clap::Args)]
pub struct TrainDqcArgs {
    /// Quality-labeled training dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Ensemble size.
    #[arg(long, default_value_t = 1)]
    pub models: usize,
    /// Master seed; each model derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the embedded defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Shared by the CLI handler and `reproduce`.
pub fn train_dqc_ensemble(
    ds: &Dataset,
    models: usize,
    seed: u64,
    section: TrainSection,
    out: &Path,
) -> Result<Vec<Network<NetScalar>>> {
    let cfg = section.config(seed);
    let trained = train_dqc::<NetScalar>(ds, models, seed, &cfg)?;
    for w in &trained.warnings {
        eprintln!("warning: {w}");
    }
    io::save_ensemble(out, &trained.nets)?;
    io::write_json(
        &out.join("history.json"),
        &DqcHistory {
            histories: &trained.histories,
            class_fractions: trained.class_fractions,
            warnings: &trained.warnings,
        },
    )?;
    Ok(trained.nets)
}

pub fn run_dqc(args: &TrainDqcArgs) -> Result<()> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let ds = io::open_dataset(&args.dataset)?;

    let guard = io::RunGuard::begin(&args.out)?;
    let nets = train_dqc_ensemble(&ds, args.models, args.seed, defaults.training.dqc, &args.out)?;
    io::write_run_manifest(
        &args.out,
        "train-dqc",
        DqcManifestConfig {
            dataset: args.dataset.display().to_string(),
            models: args.models,
            master_seed: args.seed,
            train: defaults.training.dqc,
        },
    )?;
    guard.finish()?;

    println!("saved {} quality checkpoints to {}", nets.len(), args.out.display());
    Ok(())
}

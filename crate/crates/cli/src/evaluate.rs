//! `qdtune evaluate`: score a checkpoint ensemble on one dataset split and
//! write the full JSON report.

use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;

use qdtune_core::dse::{evaluate, EvaluationReport};

use crate::io;

pub const EVAL_BATCH: usize = 64;

/// Report envelope: the dataset is referenced by payload hash, not path, so
/// re-running in another directory yields identical bytes.
#[derive(Serialize)]
pub struct EvalDocument {
    pub dataset_kind: String,
    pub dataset_sha256: String,
    pub split: String,
    pub sample_count: usize,
    pub models: usize,
    pub clip: bool,
    pub report: EvaluationReport,
}

#[derive(Serialize)]
struct EvaluateManifestConfig {
    checkpoints: String,
    dataset: String,
    split: String,
    clip: bool,
}

#[derive(clap::Args)]
pub struct EvaluateArgs {
    /// Checkpoint ensemble directory (model-* subdirectories).
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Dataset directory to score.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Which samples to score.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// Percentile-clip gradient images before standardization.
    #[arg(long)]
    pub clip: bool,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let nets = io::load_ensemble(&args.checkpoints)?;
    let ds = io::open_dataset(&args.dataset)?;
    let indices = io::split_indices(&ds, &args.split)?;

    let report = evaluate(&nets, &ds, &indices, args.clip, EVAL_BATCH)?;
    let doc = EvalDocument {
        dataset_kind: ds.kind().name(),
        dataset_sha256: ds.manifest.samples_sha256.clone(),
        split: args.split.clone(),
        sample_count: indices.len(),
        models: nets.len(),
        clip: args.clip,
        report,
    };
    io::write_json(&args.report, &doc)?;
    io::write_json(
        &args.report.with_extension("manifest.json"),
        &io::RunManifest {
            command: "evaluate".into(),
            tool_version: qdtune_core::VERSION.into(),
            config: EvaluateManifestConfig {
                checkpoints: args.checkpoints.display().to_string(),
                dataset: args.dataset.display().to_string(),
                split: args.split.clone(),
                clip: args.clip,
            },
        },
    )?;

    println!(
        "{} models on {} {} samples: accuracy {:.3} +/- {:.3}, mae {:.4} +/- {:.4}",
        doc.models,
        doc.sample_count,
        doc.split,
        doc.report.accuracy_mean,
        doc.report.accuracy_std,
        doc.report.mae_mean,
        doc.report.mae_std
    );
    Ok(())
}

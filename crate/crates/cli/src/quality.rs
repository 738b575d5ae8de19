//! `qdtune calibrate-dqc` and `qdtune validate-dqc`: the threshold
//! calibration pipeline and the quality-vs-performance correlation check.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use qdtune_core::dataset::{Dataset, DatasetKind};
use qdtune_core::dqc::{
    build_mae_curves, build_mae_observations, calibrate_thresholds, save_thresholds, MaeCurves,
    QualityThresholds, validate_quality_correlation, QualityValidationReport,
};
use qdtune_core::nn::Network;
use qdtune_core::sim::StateCode;
use qdtune_core::stats;
use qdtune_core::NetScalar;

use crate::evaluate::EVAL_BATCH;
use crate::io;

pub const DEFAULT_BINS: usize = 28;

#[derive(Serialize)]
struct CalibrateManifestConfig {
    dataset: String,
    checkpoints: String,
    split: String,
    bins: usize,
    scale_range: (f64, f64),
    clip: bool,
}

#[derive(clap::Args)]
pub struct CalibrateArgs {
    /// Threshold-sweep dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// State-estimator ensemble used to measure the MAE curves.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Output directory for mae_curves.json and thresholds.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise-scale histogram bins.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Which sweep samples to calibrate on.
    #[arg(long, default_value = "train", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// Percentile-clip gradient images before standardization.
    #[arg(long)]
    pub clip: bool,
    /// TOML file overriding the embedded defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub struct CalibrationOutput {
    pub curves: MaeCurves,
    pub thresholds: QualityThresholds,
}

/// Spearman rank correlation of each per-state bin-mean curve against the
/// bin centers, skipping empty bins. `None` where a curve is absent.
pub fn curve_spearman(curves: &MaeCurves) -> [Option<f64>; 5] {
    let mut out = [None; 5];
    for (i, slot) in curves.per_state.iter().enumerate() {
        let Some(curve) = slot else { continue };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (b, (&mae, &n)) in curve.mean_mae.iter().zip(&curve.counts).enumerate() {
            if n > 0 {
                xs.push(curve.bin_center(b));
                ys.push(mae);
            }
        }
        if xs.len() >= 2 {
            out[i] = Some(stats::spearman(&xs, &ys));
        }
    }
    out
}

/// Shared by the CLI handler and `reproduce`: fits the curves, calibrates
/// the thresholds, and writes `mae_curves.json` + `thresholds.json`.
pub fn calibrate(
    dse_nets: &[Network<NetScalar>],
    ds: &Dataset,
    indices: &[usize],
    bins: usize,
    scale_range: (f64, f64),
    clip: bool,
    out: &Path,
) -> Result<CalibrationOutput> {
    if ds.kind() != DatasetKind::ThresholdSweep {
        bail!("calibration needs a threshold-sweep dataset, got {}", ds.kind().name());
    }
    let observations = build_mae_observations(dse_nets, ds, indices, clip, EVAL_BATCH)?;
    let curves = build_mae_curves(&observations, bins, scale_range)?;
    let thresholds = calibrate_thresholds(&curves)?;
    std::fs::create_dir_all(out)?;
    io::write_json(&out.join("mae_curves.json"), &curves)?;
    save_thresholds(&out.join("thresholds.json"), &thresholds, &ds.manifest.samples_sha256)?;
    Ok(CalibrationOutput { curves, thresholds })
}

pub fn run_calibrate(args: &CalibrateArgs) -> Result<()> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let nets = io::load_ensemble(&args.checkpoints)?;
    let ds = io::open_dataset(&args.dataset)?;
    let indices = io::split_indices(&ds, &args.split)?;
    let scale_range = (defaults.sampling.sweep_min, defaults.sampling.sweep_max);

    let guard = io::RunGuard::begin(&args.out)?;
    let output = calibrate(&nets, &ds, &indices, args.bins, scale_range, args.clip, &args.out)?;
    io::write_run_manifest(
        &args.out,
        "calibrate-dqc",
        CalibrateManifestConfig {
            dataset: args.dataset.display().to_string(),
            checkpoints: args.checkpoints.display().to_string(),
            split: args.split.clone(),
            bins: args.bins,
            scale_range,
            clip: args.clip,
        },
    )?;
    guard.finish()?;

    let rho = curve_spearman(&output.curves);
    for state in StateCode::ALL {
        let t = output.thresholds.for_state(state);
        let rho_text = match rho[state.index()] {
            Some(r) => format!("{r:.3}"),
            None => "n/a".into(),
        };
        println!(
            "{}: lower {:.3}, upper {:.3}, curve spearman {rho_text}",
            state.name(),
            t.lower,
            t.upper
        );
    }
    println!("thresholds written to {}", args.out.join("thresholds.json").display());
    Ok(())
}

#[derive(Serialize)]
struct ValidateManifestConfig {
    dataset: String,
    dse_checkpoints: String,
    dqc_checkpoints: String,
    split: String,
    clip: bool,
}

/// Report envelope for the correlation check.
#[derive(Serialize)]
pub struct ValidationDocument {
    pub dataset_sha256: String,
    pub split: String,
    pub sample_count: usize,
    pub report: QualityValidationReport,
}

#[derive(clap::Args)]
pub struct ValidateArgs {
    /// Threshold-sweep dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// State-estimator ensemble directory.
    #[arg(long)]
    pub dse: PathBuf,
    /// Quality-gate ensemble directory.
    #[arg(long)]
    pub dqc: PathBuf,
    /// Output report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Which sweep samples to validate on.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    pub split: String,
    /// Percentile-clip gradient images before standardization.
    #[arg(long)]
    pub clip: bool,
}

/// Shared by the CLI handler and `reproduce`.
pub fn validate(
    dqc_nets: &[Network<NetScalar>],
    dse_nets: &[Network<NetScalar>],
    ds: &Dataset,
    indices: &[usize],
    clip: bool,
    split: &str,
    report_path: &Path,
) -> Result<ValidationDocument> {
    let report = validate_quality_correlation(dqc_nets, dse_nets, ds, indices, clip, EVAL_BATCH)?;
    let doc = ValidationDocument {
        dataset_sha256: ds.manifest.samples_sha256.clone(),
        split: split.into(),
        sample_count: indices.len(),
        report,
    };
    io::write_json(report_path, &doc)?;
    Ok(doc)
}

pub fn run_validate(args: &ValidateArgs) -> Result<()> {
    let dse_nets = io::load_ensemble(&args.dse)?;
    let dqc_nets = io::load_ensemble(&args.dqc)?;
    let ds = io::open_dataset(&args.dataset)?;
    let indices = io::split_indices(&ds, &args.split)?;

    let doc = validate(&dqc_nets, &dse_nets, &ds, &indices, args.clip, &args.split, &args.report)?;
    let manifest_path = args.report.with_extension("manifest.json");
    io::write_json(
        &manifest_path,
        &io::RunManifest {
            command: "validate-dqc".into(),
            tool_version: qdtune_core::VERSION.into(),
            config: ValidateManifestConfig {
                dataset: args.dataset.display().to_string(),
                dse_checkpoints: args.dse.display().to_string(),
                dqc_checkpoints: args.dqc.display().to_string(),
                split: args.split.clone(),
                clip: args.clip,
            },
        },
    )?;

    for m in &doc.report.per_class {
        println!(
            "{}: {} samples, dse accuracy {:.3}, dse mae {:.4}",
            m.class.name(),
            m.count,
            m.dse_accuracy_mean,
            m.dse_mae_mean
        );
    }
    println!(
        "accuracy ordering holds: {}; mae ordering holds: {}",
        doc.report.accuracy_ordering_holds, doc.report.mae_ordering_holds
    );
    Ok(())
}

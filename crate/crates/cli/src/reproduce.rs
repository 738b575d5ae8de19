//! `qdtune reproduce`: the full chain from one seed. Generates every
//! dataset, trains both state ensembles and the quality gate, calibrates the
//! thresholds, validates the quality ordering, runs a tuning demo, evaluates
//! the sliding-window map, and writes one summary report with the numbers
//! the acceptance checks read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use qdtune_core::autotune::{
    class_mask, evaluate_map, mask_iou, mixed_label_mask, noise_gradient_scan, run_tuning,
    EnsembleEstimator, EnsembleGate, SimulatedEnvironment,
};
use qdtune_core::config::{Defaults, ScalePreset};
use qdtune_core::dataset::{generate_dataset, Dataset, DatasetKind};
use qdtune_core::dqc::{QualityClass, QualityThresholds, QualityValidationReport};
use qdtune_core::dse::evaluate;
use qdtune_core::nn::{Network, NetworkSpec};
use qdtune_core::noise::NoiseMask;
use qdtune_core::render::boxplot_svg;
use qdtune_core::seed;
use qdtune_core::sim::{StateCode, StateLabel, VoltageWindow};
use qdtune_core::stats;
use qdtune_core::NetScalar;

use crate::evaluate::{EvalDocument, EVAL_BATCH};
use crate::generate::GenerateManifestConfig;
use crate::io;
use crate::maps;
use crate::quality;
use crate::train;

/// Fraction of the top prediction below which a map pixel counts as mixed.
pub const MIXED_DOMINANCE: f64 = 0.7;

/// Headroom above the calibrated DD upper threshold for the map noise ramp,
/// so a thin low-quality strip survives at the right edge.
pub const RAMP_HEADROOM: f64 = 1.25;

/// Demo tuning run: start in the left-dot region of the reference device and
/// steer toward the double dot.
pub const TUNE_START: (f64, f64) = (60.0, 0.0);

#[derive(clap::Args)]
pub struct ReproduceArgs {
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Work-size preset from the [scales] config section.
    #[arg(long, default_value = "desk")]
    pub scale: String,
    /// Output directory for all artifacts.
    #[arg(long, default_value = "qdtune-reproduce")]
    pub out: PathBuf,
    /// TOML file overriding the embedded defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReproduceManifestConfig {
    master_seed: u64,
    scale: String,
    preset: ScalePreset,
    defaults: Defaults,
}

#[derive(Serialize)]
struct AugmentationSummary {
    train_samples: usize,
    test_samples: usize,
    models: usize,
    combined_accuracy_mean: f64,
    combined_accuracy_std: f64,
    noiseless_accuracy_mean: f64,
    noiseless_accuracy_std: f64,
    /// Combined minus noiseless, percentage points.
    gap_points: f64,
    combined_model_accuracies: Vec<f64>,
    noiseless_model_accuracies: Vec<f64>,
}

#[derive(Serialize)]
struct CalibrationSummary {
    sweep_samples: usize,
    bins: usize,
    scale_range: (f64, f64),
    /// Rank correlation of each bin-mean MAE curve vs noise scale.
    spearman_by_state: BTreeMap<String, Option<f64>>,
    thresholds: QualityThresholds,
}

#[derive(Serialize)]
struct TuneSummary {
    converged: bool,
    succeeded: bool,
    steps: usize,
    termination: String,
    final_voltages: (f64, f64),
}

#[derive(Serialize)]
struct MapSummary {
    scan_pixels: (usize, usize),
    window_pixels: usize,
    margin_px: usize,
    output_pixels: (usize, usize),
    max_scale: f64,
    dominance: f64,
    moderate_pixels: usize,
    mixed_pixels: usize,
    moderate_mixed_iou: f64,
}

#[derive(Serialize)]
struct ReproduceReport {
    format: String,
    version: u32,
    tool_version: String,
    master_seed: u64,
    scale: String,
    augmentation: AugmentationSummary,
    calibration: CalibrationSummary,
    quality_validation: QualityValidationReport,
    tune_demo: TuneSummary,
    map: MapSummary,
    artifacts: Vec<String>,
}

struct Stage {
    t0: Instant,
}

impl Stage {
    fn new() -> Stage {
        Stage { t0: Instant::now() }
    }

    fn done(&mut self, what: &str) {
        eprintln!("[{:7.1}s] {what}", self.t0.elapsed().as_secs_f64());
    }
}

fn generate_stage(
    defaults: &Defaults,
    out: &Path,
    rel: &str,
    kind: DatasetKind,
    count: usize,
    master_seed: u64,
    thresholds: Option<QualityThresholds>,
) -> Result<Dataset> {
    let dir = out.join(rel);
    let cfg = defaults.generate_config(kind, count, thresholds);
    generate_dataset(&cfg, master_seed, &dir)?;
    io::write_run_manifest(
        &dir,
        "generate",
        GenerateManifestConfig { master_seed, generate: cfg },
    )?;
    io::open_dataset(&dir)
}

#[derive(Serialize)]
struct StageTrainManifest<'a> {
    dataset: &'a str,
    arch: &'a str,
    models: usize,
    master_seed: u64,
    clip: bool,
}

fn train_stage(
    defaults: &Defaults,
    out: &Path,
    rel: &str,
    dataset_rel: &str,
    ds: &Dataset,
    spec: &NetworkSpec,
    models: usize,
    master_seed: u64,
) -> Result<Vec<Network<NetScalar>>> {
    let dir = out.join(rel);
    let (nets, _) = train::train_dse_ensemble(
        ds,
        spec,
        models,
        master_seed,
        false,
        defaults.training.dse,
        &dir,
    )?;
    io::write_run_manifest(
        &dir,
        "train-dse",
        StageTrainManifest {
            dataset: dataset_rel,
            arch: &spec.name,
            models,
            master_seed,
            clip: false,
        },
    )?;
    Ok(nets)
}

fn eval_stage(
    nets: &[Network<NetScalar>],
    ds: &Dataset,
    path: &Path,
) -> Result<EvalDocument> {
    let indices: Vec<usize> = (0..ds.count()).collect();
    let report = evaluate(nets, ds, &indices, false, EVAL_BATCH)?;
    let doc = EvalDocument {
        dataset_kind: ds.kind().name(),
        dataset_sha256: ds.manifest.samples_sha256.clone(),
        split: "all".into(),
        sample_count: indices.len(),
        models: nets.len(),
        clip: false,
        report,
    };
    io::write_json(path, &doc)?;
    Ok(doc)
}

pub fn run(args: &ReproduceArgs) -> Result<()> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let preset = defaults.scale(&args.scale)?;
    let out = &args.out;
    let s = |k: u64| seed::derive(args.seed, k);
    let mut stage = Stage::new();

    let guard = io::RunGuard::begin(out)?;

    // Datasets. The two training sets differ only in noise; the held-out test
    // set is always combined-noise, mirroring deployment conditions.
    let ds_noiseless = generate_stage(
        &defaults, out, "datasets/noiseless-train",
        DatasetKind::Noiseless, preset.train_samples, s(0), None,
    )?;
    let ds_combined = generate_stage(
        &defaults, out, "datasets/combined-train",
        DatasetKind::Combined, preset.train_samples, s(1), None,
    )?;
    let ds_test = generate_stage(
        &defaults, out, "datasets/combined-test",
        DatasetKind::Combined, preset.test_samples, s(2), None,
    )?;
    let ds_sweep = generate_stage(
        &defaults, out, "datasets/sweep",
        DatasetKind::ThresholdSweep, preset.sweep_samples, s(3), None,
    )?;
    stage.done("datasets generated");

    // Both ensembles share the compact architecture so the comparison
    // isolates the training data, not the model capacity.
    let spec = NetworkSpec::noiseless_dse();
    let nets_combined = train_stage(
        &defaults, out, "checkpoints/dse-combined", "datasets/combined-train",
        &ds_combined, &spec, preset.dse_models, s(4),
    )?;
    stage.done("combined-noise ensemble trained");
    let nets_noiseless = train_stage(
        &defaults, out, "checkpoints/dse-noiseless", "datasets/noiseless-train",
        &ds_noiseless, &spec, preset.dse_models, s(5),
    )?;
    stage.done("noiseless ensemble trained");

    let eval_combined = eval_stage(&nets_combined, &ds_test, &out.join("reports/eval-combined.json"))?;
    let eval_noiseless =
        eval_stage(&nets_noiseless, &ds_test, &out.join("reports/eval-noiseless.json"))?;
    let gap_points =
        100.0 * (eval_combined.report.accuracy_mean - eval_noiseless.report.accuracy_mean);
    stage.done("ensembles evaluated on the held-out combined test set");

    let svg = boxplot_svg(
        "state estimator accuracy by training set",
        "accuracy",
        &[
            ("combined".to_string(), stats::box_stats(&eval_combined.report.model_accuracy)),
            ("noiseless".to_string(), stats::box_stats(&eval_noiseless.report.model_accuracy)),
        ],
    );
    std::fs::write(out.join("reports/accuracy_boxplot.svg"), svg)?;

    // Quality calibration from the sweep's training split, then the labeled
    // set for the gate and the correlation check on the held-out split.
    let sweep_splits = ds_sweep.splits();
    let scale_range = (defaults.sampling.sweep_min, defaults.sampling.sweep_max);
    let calibration = quality::calibrate(
        &nets_combined,
        &ds_sweep,
        &sweep_splits.train,
        quality::DEFAULT_BINS,
        scale_range,
        false,
        &out.join("reports"),
    )?;
    stage.done("thresholds calibrated");

    let ds_dqc = generate_stage(
        &defaults, out, "datasets/dqc-train",
        DatasetKind::DqcLabeled, preset.dqc_samples, s(6), Some(calibration.thresholds),
    )?;
    let nets_dqc = train::train_dqc_ensemble(
        &ds_dqc,
        preset.dqc_models,
        s(7),
        defaults.training.dqc,
        &out.join("checkpoints/dqc"),
    )?;
    io::write_run_manifest(
        &out.join("checkpoints/dqc"),
        "train-dqc",
        StageTrainManifest {
            dataset: "datasets/dqc-train",
            arch: "dqc",
            models: preset.dqc_models,
            master_seed: s(7),
            clip: false,
        },
    )?;
    stage.done("quality gate trained");

    let validation = quality::validate(
        &nets_dqc,
        &nets_combined,
        &ds_sweep,
        &sweep_splits.test,
        false,
        "test",
        &out.join("reports/quality_validation.json"),
    )?;
    stage.done("quality ordering validated");

    // Tuning demo on a quiet device: left dot to double dot.
    let tune_summary = {
        let gate = EnsembleGate { nets: &nets_dqc };
        let estimator = EnsembleEstimator { nets: &nets_combined, clip: false };
        let mut env = SimulatedEnvironment::new(
            defaults.device.clone(),
            defaults.noise.params(NoiseMask::standard(), 0.0),
            defaults.sampling.occupancy_bound,
            s(8),
        );
        let target = StateLabel::<f64>::one_hot(StateCode::DoubleDot);
        let outcome = run_tuning(
            &gate,
            &estimator,
            &mut env,
            &target,
            &defaults.tune.config,
            TUNE_START,
            defaults.tune.budget,
        )?;
        let mut lines = String::new();
        for record in &outcome.state.log {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        std::fs::create_dir_all(out.join("tune"))?;
        std::fs::write(out.join("tune/log.jsonl"), lines)?;
        io::write_json(&out.join("tune/outcome.json"), &outcome)?;
        TuneSummary {
            converged: outcome.converged,
            succeeded: outcome.succeeded,
            steps: outcome.steps,
            termination: outcome.termination.clone(),
            final_voltages: (outcome.state.v1, outcome.state.v2),
        }
    };
    stage.done("tuning demo finished");

    // Large scan with a left-to-right noise ramp, evaluated pixel by pixel.
    // The ramp tops out just past the calibrated DD upper threshold so the
    // scan crosses all three quality bands.
    let map_summary = {
        let pitch =
            defaults.sampling.window_span_mv / (defaults.sampling.image_pixels - 1) as f64;
        let span = pitch * (preset.map_pixels - 1) as f64;
        let window = VoltageWindow::centered(75.0, 75.0, span, preset.map_pixels);
        let max_scale = RAMP_HEADROOM
            * calibration.thresholds.for_state(StateCode::DoubleDot).upper;
        let scan = noise_gradient_scan(
            &defaults.device,
            &window,
            &defaults.noise.params(NoiseMask::standard(), 1.0),
            max_scale,
            defaults.sampling.occupancy_bound,
            s(9),
        )?;
        let estimator = EnsembleEstimator { nets: &nets_combined, clip: false };
        let gate = EnsembleGate { nets: &nets_dqc };
        let eval = evaluate_map(&scan, &estimator, &gate, preset.map_window_pixels)?;

        let moderate = class_mask(&eval.quality, QualityClass::Moderate);
        let mixed = mixed_label_mask(&eval.predictions, MIXED_DOMINANCE);
        let iou = mask_iou(&moderate, &mixed);

        let maps_dir = out.join("maps");
        maps::write_bundle(&maps_dir, &scan, Some(&eval), max_scale, s(9))?;
        let rendered = maps::render_bundle(&maps_dir, &maps_dir)?;
        io::write_run_manifest(
            &maps_dir,
            "render-maps",
            maps::RenderManifestConfig { scan: "maps".to_string(), rendered },
        )?;

        let (rows, cols) = scan.sensor.dim();
        let (out_rows, out_cols) = eval.quality.dim();
        MapSummary {
            scan_pixels: (rows, cols),
            window_pixels: eval.window_pixels,
            margin_px: eval.margin_px,
            output_pixels: (out_rows, out_cols),
            max_scale,
            dominance: MIXED_DOMINANCE,
            moderate_pixels: moderate.iter().filter(|&&b| b).count(),
            mixed_pixels: mixed.iter().filter(|&&b| b).count(),
            moderate_mixed_iou: iou,
        }
    };
    stage.done("sliding-window map evaluated");

    let spearman_raw = quality::curve_spearman(&calibration.curves);
    let mut spearman_by_state = BTreeMap::new();
    for state in StateCode::ALL {
        spearman_by_state.insert(state.name().to_string(), spearman_raw[state.index()]);
    }

    let report = ReproduceReport {
        format: "qdtune-reproduce-report".into(),
        version: 1,
        tool_version: qdtune_core::VERSION.into(),
        master_seed: args.seed,
        scale: args.scale.clone(),
        augmentation: AugmentationSummary {
            train_samples: preset.train_samples,
            test_samples: preset.test_samples,
            models: preset.dse_models,
            combined_accuracy_mean: eval_combined.report.accuracy_mean,
            combined_accuracy_std: eval_combined.report.accuracy_std,
            noiseless_accuracy_mean: eval_noiseless.report.accuracy_mean,
            noiseless_accuracy_std: eval_noiseless.report.accuracy_std,
            gap_points,
            combined_model_accuracies: eval_combined.report.model_accuracy.clone(),
            noiseless_model_accuracies: eval_noiseless.report.model_accuracy.clone(),
        },
        calibration: CalibrationSummary {
            sweep_samples: preset.sweep_samples,
            bins: quality::DEFAULT_BINS,
            scale_range,
            spearman_by_state,
            thresholds: calibration.thresholds,
        },
        quality_validation: validation.report,
        tune_demo: tune_summary,
        map: map_summary,
        artifacts: vec![
            "datasets/noiseless-train".into(),
            "datasets/combined-train".into(),
            "datasets/combined-test".into(),
            "datasets/sweep".into(),
            "datasets/dqc-train".into(),
            "checkpoints/dse-combined".into(),
            "checkpoints/dse-noiseless".into(),
            "checkpoints/dqc".into(),
            "reports/eval-combined.json".into(),
            "reports/eval-noiseless.json".into(),
            "reports/accuracy_boxplot.svg".into(),
            "reports/mae_curves.json".into(),
            "reports/thresholds.json".into(),
            "reports/quality_validation.json".into(),
            "tune/log.jsonl".into(),
            "tune/outcome.json".into(),
            "maps".into(),
        ],
    };
    io::write_json(&out.join("reproduce_report.json"), &report)?;
    io::write_run_manifest(
        out,
        "reproduce",
        ReproduceManifestConfig {
            master_seed: args.seed,
            scale: args.scale.clone(),
            preset,
            defaults: defaults.clone(),
        },
    )?;
    guard.finish()?;
    stage.done("report written");

    println!(
        "augmentation gap {:.1} points; quality ordering (accuracy/mae): {}/{}; map IoU {:.3}",
        report.augmentation.gap_points,
        report.quality_validation.accuracy_ordering_holds,
        report.quality_validation.mae_ordering_holds,
        report.map.moderate_mixed_iou
    );
    println!("full report at {}", out.join("reproduce_report.json").display());
    Ok(())
}

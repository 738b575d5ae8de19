//! Data quality control: noise-threshold calibration from MAE-vs-noise
//! curves, 3-class quality labels, and the quality classifier glue.
//!
//! The calibration pipeline: evaluate a state classifier on a noise-sweep
//! dataset, bin the per-sample MAE by noise scale separately for each
//! dominant state, then place a lower threshold where the binned mean MAE
//! has risen by 2.5% of its full range and an upper threshold at the 50%
//! crossing. Scales below the lower threshold are "high" quality, between
//! the two "moderate", above the upper "low".

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_gradient_batch, load_noise_scales, load_quality_batch, Dataset, DatasetKind,
};
use crate::dse::{ensemble_mean_probs, preprocess_batch};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{train_models, Network, NetworkSpec, TrainConfig, TrainHistory};
use crate::sim::{StateCode, STATE_COUNT};

/// Fraction of full curve range used for the lower (high/moderate) crossing.
pub const LOWER_RANGE_FRACTION: f64 = 0.025;
/// Fraction of full curve range used for the upper (moderate/low) crossing.
pub const UPPER_RANGE_FRACTION: f64 = 0.5;
/// Curves with less dynamic range than this are rejected as flat.
pub const FLAT_RANGE_FLOOR: f64 = 1e-4;

/// Three-level quality grade emitted by the DQC module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QualityClass {
    High,
    Moderate,
    Low,
}

impl QualityClass {
    pub const ALL: [QualityClass; 3] =
        [QualityClass::High, QualityClass::Moderate, QualityClass::Low];

    /// Stable index, also the network output column.
    pub fn index(self) -> usize {
        match self {
            QualityClass::High => 0,
            QualityClass::Moderate => 1,
            QualityClass::Low => 2,
        }
    }

    /// Dataset record code. 255 is reserved for "absent".
    pub fn code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_code(code: u8) -> Option<QualityClass> {
        QualityClass::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityClass::High => "high",
            QualityClass::Moderate => "moderate",
            QualityClass::Low => "low",
        }
    }
}

/// Lower/upper noise-scale crossings for one charge state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateThreshold {
    pub lower: f64,
    pub upper: f64,
}

/// Per-state calibrated noise thresholds, indexed by [`StateCode::index`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub per_state: [StateThreshold; STATE_COUNT],
}

impl QualityThresholds {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.per_state.iter().enumerate() {
            if !(t.lower >= 0.0 && t.lower < t.upper) {
                return Err(Error::invalid(format!(
                    "thresholds for state {} must satisfy 0 <= lower < upper, got [{}, {}]",
                    StateCode::from_index(i).unwrap().name(),
                    t.lower,
                    t.upper
                )));
            }
        }
        Ok(())
    }

    pub fn for_state(&self, state: StateCode) -> StateThreshold {
        self.per_state[state.index()]
    }
}

/// Maps a sample's noise scale to a quality class given its dominant state.
/// Boundaries are half-open: a scale exactly at a threshold belongs to the
/// worse class.
pub fn assign_quality(
    noise_scale: f64,
    state: StateCode,
    thresholds: &QualityThresholds,
) -> QualityClass {
    let t = thresholds.for_state(state);
    if noise_scale < t.lower {
        QualityClass::High
    } else if noise_scale < t.upper {
        QualityClass::Moderate
    } else {
        QualityClass::Low
    }
}

/// One classifier evaluation used for calibration: the sample's recorded
/// noise scale, its dominant true state, and the model's label MAE.
#[derive(Clone, Copy, Debug)]
pub struct MaeObservation {
    pub noise_scale: f64,
    pub state: StateCode,
    pub mae: f64,
}

/// Binned mean MAE against noise scale for one state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaeCurve {
    /// `bins + 1` uniform edges over the sweep range.
    pub bin_edges: Vec<f64>,
    /// Mean MAE per bin; only meaningful where `counts > 0`.
    pub mean_mae: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MaeCurve {
    pub fn bin_center(&self, bin: usize) -> f64 {
        0.5 * (self.bin_edges[bin] + self.bin_edges[bin + 1])
    }

    /// (center, mean) pairs for bins that actually received samples.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.counts.len())
            .filter(|&b| self.counts[b] > 0)
            .map(|b| (self.bin_center(b), self.mean_mae[b]))
            .collect()
    }

    /// max - min of the binned means over populated bins.
    pub fn full_range(&self) -> f64 {
        let pts = self.points();
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }
}

/// Per-state curves over a common noise-scale range. A state with no
/// observations gets `None` rather than failing the whole build.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaeCurves {
    pub per_state: [Option<MaeCurve>; STATE_COUNT],
    pub scale_min: f64,
    pub scale_max: f64,
}

/// Bins classifier evaluations into per-state MAE curves.
pub fn build_mae_curves(
    observations: &[MaeObservation],
    bins: usize,
    scale_range: (f64, f64),
) -> Result<MaeCurves> {
    let (lo, hi) = scale_range;
    if bins == 0 || !(hi > lo) {
        return Err(Error::invalid("need at least one bin and a non-empty scale range"));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let mut sums = vec![[0.0f64; STATE_COUNT]; bins];
    let mut counts = vec![[0usize; STATE_COUNT]; bins];
    for obs in observations {
        if !obs.mae.is_finite() || !obs.noise_scale.is_finite() {
            return Err(Error::invalid("non-finite calibration observation"));
        }
        if obs.noise_scale < lo || obs.noise_scale > hi {
            continue;
        }
        let mut b = ((obs.noise_scale - lo) / width) as usize;
        if b == bins {
            b -= 1; // right edge closes the last bin
        }
        sums[b][obs.state.index()] += obs.mae;
        counts[b][obs.state.index()] += 1;
    }
    let per_state = std::array::from_fn(|s| {
        let total: usize = counts.iter().map(|c| c[s]).sum();
        if total == 0 {
            return None;
        }
        Some(MaeCurve {
            bin_edges: edges.clone(),
            mean_mae: (0..bins)
                .map(|b| if counts[b][s] > 0 { sums[b][s] / counts[b][s] as f64 } else { 0.0 })
                .collect(),
            counts: (0..bins).map(|b| counts[b][s]).collect(),
        })
    });
    Ok(MaeCurves { per_state, scale_min: lo, scale_max: hi })
}

/// First scale where the piecewise-linear interpolation of `points` reaches
/// `target`. Points must be in ascending scale order.
fn first_crossing(points: &[(f64, f64)], target: f64) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    if points[0].1 >= target {
        return Some(points[0].0);
    }
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if y1 >= target {
            if y1 == y0 {
                return Some(x1);
            }
            return Some(x0 + (target - y0) / (y1 - y0) * (x1 - x0));
        }
    }
    None
}

/// Derives per-state thresholds from the curves. The four dotted states must
/// have usable curves; the no-dot thresholds are set to the minimum of the
/// other states' crossings (the most conservative aggregation).
pub fn calibrate_thresholds(curves: &MaeCurves) -> Result<QualityThresholds> {
    let mut per_state = [StateThreshold { lower: 0.0, upper: 0.0 }; STATE_COUNT];
    let mut nd_lower = f64::INFINITY;
    let mut nd_upper = f64::INFINITY;
    for state in StateCode::ALL {
        if state == StateCode::NoDot {
            continue;
        }
        let curve = curves.per_state[state.index()]
            .as_ref()
            .ok_or(Error::EmptyPartition { state: state.name() })?;
        let pts = curve.points();
        if pts.len() < 2 {
            return Err(Error::EmptyPartition { state: state.name() });
        }
        let range = curve.full_range();
        if range < FLAT_RANGE_FLOOR {
            return Err(Error::FlatCurve { state: state.name(), range });
        }
        let floor = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let lower = first_crossing(&pts, floor + LOWER_RANGE_FRACTION * range)
            .expect("crossing below the curve maximum always exists");
        let upper = first_crossing(&pts, floor + UPPER_RANGE_FRACTION * range)
            .expect("crossing below the curve maximum always exists");
        let upper = upper.max(lower + f64::EPSILON * upper.abs().max(1.0));
        per_state[state.index()] = StateThreshold { lower, upper };
        nd_lower = nd_lower.min(lower);
        nd_upper = nd_upper.min(upper);
    }
    per_state[StateCode::NoDot.index()] = StateThreshold { lower: nd_lower, upper: nd_upper };
    let out = QualityThresholds { per_state };
    out.validate()?;
    Ok(out)
}

/// On-disk form of the calibrated thresholds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub format: String,
    pub version: u32,
    pub thresholds: QualityThresholds,
    /// Hash of the samples.bin the calibration ran on.
    pub calibration_dataset_sha256: String,
    pub tool_version: String,
}

pub const THRESHOLDS_FORMAT: &str = "qdtune-thresholds";

pub fn save_thresholds(
    path: &Path,
    thresholds: &QualityThresholds,
    calibration_dataset_sha256: &str,
) -> Result<()> {
    thresholds.validate()?;
    let file = ThresholdsFile {
        format: THRESHOLDS_FORMAT.into(),
        version: 1,
        thresholds: *thresholds,
        calibration_dataset_sha256: calibration_dataset_sha256.into(),
        tool_version: crate::VERSION.into(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_thresholds(path: &Path) -> Result<ThresholdsFile> {
    let text = std::fs::read_to_string(path)?;
    let file: ThresholdsFile = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != THRESHOLDS_FORMAT || file.version != 1 {
        return Err(Error::CorruptManifest {
            path: path.display().to_string(),
            reason: format!("unsupported format {}/{}", file.format, file.version),
        });
    }
    file.thresholds.validate()?;
    Ok(file)
}

/// Evaluates a state-classifier ensemble over sweep records and pairs each
/// sample's label MAE with its recorded noise scale and dominant state.
/// These observations feed [`build_mae_curves`].
pub fn build_mae_observations<F: Float>(
    dse_nets: &[Network<F>],
    ds: &Dataset,
    indices: &[usize],
    clip: bool,
    batch_size: usize,
) -> Result<Vec<MaeObservation>> {
    if indices.is_empty() {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    let (x_raw, y) = load_gradient_batch::<F>(ds, indices)?;
    let x = preprocess_batch(&x_raw, clip);
    let probs = ensemble_mean_probs(dse_nets, &x, batch_size)?;
    let scales = load_noise_scales(ds, indices)?;

    let mut out = Vec::with_capacity(indices.len());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let label: Vec<f64> = y.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let mae = row
            .iter()
            .zip(label.iter())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / STATE_COUNT as f64;
        out.push(MaeObservation {
            noise_scale: scales[i],
            state: StateCode::from_index(crate::stats::argmax(&label)).unwrap(),
            mae,
        });
    }
    Ok(out)
}

/// Number of quality classes.
pub const QUALITY_COUNT: usize = 3;
/// Quality classes with fewer held-out samples than this are excluded from
/// ordering assertions.
pub const MIN_CLASS_SAMPLES: usize = 10;
/// A training-set quality class below this fraction triggers a warning.
pub const IMBALANCE_WARN_FRACTION: f64 = 0.05;

/// Output of [`train_dqc`]: the ensemble plus label-balance diagnostics.
#[derive(Clone, Debug)]
pub struct DqcTraining<F> {
    pub nets: Vec<Network<F>>,
    pub histories: Vec<TrainHistory>,
    /// Fraction of training samples per quality class (high, moderate, low).
    pub class_fractions: [f64; QUALITY_COUNT],
    pub warnings: Vec<String>,
}

/// Trains the quality classifier on a quality-labeled sweep dataset.
pub fn train_dqc<F: Float>(
    ds: &Dataset,
    models: usize,
    master_seed: u64,
    train_cfg: &TrainConfig,
) -> Result<DqcTraining<F>> {
    if ds.kind() != DatasetKind::DqcLabeled {
        return Err(Error::invalid(format!(
            "quality training needs a quality-labeled dataset, got {}",
            ds.kind().name()
        )));
    }
    let splits = ds.splits();
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::invalid("dataset splits leave no training or validation data"));
    }
    let (x_train_raw, y_train) = load_quality_batch::<F>(ds, &splits.train)?;
    let (x_val_raw, y_val) = load_quality_batch::<F>(ds, &splits.val)?;
    let x_train = preprocess_batch(&x_train_raw, false);
    let x_val = preprocess_batch(&x_val_raw, false);

    let n = y_train.nrows() as f64;
    let class_fractions: [f64; QUALITY_COUNT] =
        std::array::from_fn(|c| y_train.column(c).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n);
    let warnings: Vec<String> = QualityClass::ALL
        .iter()
        .enumerate()
        .filter(|(c, _)| class_fractions[*c] < IMBALANCE_WARN_FRACTION)
        .map(|(c, q)| {
            format!(
                "quality class {} holds only {:.1}% of training samples",
                q.name(),
                class_fractions[c] * 100.0
            )
        })
        .collect();

    let (nets, histories) = train_models(
        &NetworkSpec::dqc(),
        &x_train,
        &y_train,
        &x_val,
        &y_val,
        models,
        master_seed,
        train_cfg,
    )?;
    Ok(DqcTraining { nets, histories, class_fractions, warnings })
}

/// Ensemble-mean quality call for each requested record.
pub fn predict_quality<F: Float>(
    dqc_nets: &[Network<F>],
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<QualityClass>> {
    if indices.is_empty() {
        return Err(Error::invalid("prediction needs at least one sample"));
    }
    let (x_raw, _) = load_gradient_batch::<F>(ds, indices)?;
    let x = preprocess_batch(&x_raw, false);
    let probs = ensemble_mean_probs(dqc_nets, &x, batch_size)?;
    if probs.ncols() != QUALITY_COUNT {
        return Err(Error::ShapeMismatch(format!(
            "quality classifier emits {} outputs, expected {QUALITY_COUNT}",
            probs.ncols()
        )));
    }
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| QualityClass::ALL[crate::stats::argmax(r.as_slice().unwrap())])
        .collect())
}

/// State-classifier metrics over the samples assigned to one quality class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityClassMetrics {
    pub class: QualityClass,
    pub count: usize,
    pub dse_accuracy_mean: f64,
    pub dse_accuracy_std: f64,
    pub dse_mae_mean: f64,
    pub dse_mae_std: f64,
}

/// Quality-vs-performance correlation report: does the gate actually sort
/// scans by how well the state classifier will do on them?
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityValidationReport {
    /// One entry per quality class in high, moderate, low order.
    pub per_class: Vec<QualityClassMetrics>,
    /// Classes with at least [`MIN_CLASS_SAMPLES`] samples.
    pub included: Vec<QualityClass>,
    /// Accuracy strictly decreases across the included classes.
    pub accuracy_ordering_holds: bool,
    /// MAE strictly increases across the included classes.
    pub mae_ordering_holds: bool,
}

/// Builds the correlation report from an explicit quality assignment, one
/// class per index. Split out of [`validate_quality_correlation`] so the
/// partition logic is testable with threshold-derived classes.
pub fn quality_report_from_partition<F: Float>(
    classes: &[QualityClass],
    dse_nets: &[Network<F>],
    ds: &Dataset,
    indices: &[usize],
    clip: bool,
    batch_size: usize,
) -> Result<QualityValidationReport> {
    if classes.len() != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} quality calls for {} samples",
            classes.len(),
            indices.len()
        )));
    }
    let mut per_class = Vec::with_capacity(QUALITY_COUNT);
    for q in QualityClass::ALL {
        let members: Vec<usize> = indices
            .iter()
            .zip(classes.iter())
            .filter(|(_, c)| **c == q)
            .map(|(i, _)| *i)
            .collect();
        if members.is_empty() {
            per_class.push(QualityClassMetrics {
                class: q,
                count: 0,
                dse_accuracy_mean: 0.0,
                dse_accuracy_std: 0.0,
                dse_mae_mean: 0.0,
                dse_mae_std: 0.0,
            });
            continue;
        }
        let report = crate::dse::evaluate(dse_nets, ds, &members, clip, batch_size)?;
        per_class.push(QualityClassMetrics {
            class: q,
            count: members.len(),
            dse_accuracy_mean: report.accuracy_mean,
            dse_accuracy_std: report.accuracy_std,
            dse_mae_mean: report.mae_mean,
            dse_mae_std: report.mae_std,
        });
    }
    let included: Vec<QualityClass> = per_class
        .iter()
        .filter(|m| m.count >= MIN_CLASS_SAMPLES)
        .map(|m| m.class)
        .collect();
    let chain: Vec<&QualityClassMetrics> = per_class
        .iter()
        .filter(|m| included.contains(&m.class))
        .collect();
    let accuracy_ordering_holds = chain
        .windows(2)
        .all(|w| w[0].dse_accuracy_mean > w[1].dse_accuracy_mean);
    let mae_ordering_holds = chain.windows(2).all(|w| w[0].dse_mae_mean < w[1].dse_mae_mean);
    Ok(QualityValidationReport {
        per_class,
        included,
        accuracy_ordering_holds,
        mae_ordering_holds,
    })
}

/// Partitions held-out samples by the quality ensemble's own predictions and
/// reports the state classifier's per-class performance.
pub fn validate_quality_correlation<F: Float>(
    dqc_nets: &[Network<F>],
    dse_nets: &[Network<F>],
    ds: &Dataset,
    indices: &[usize],
    clip: bool,
    batch_size: usize,
) -> Result<QualityValidationReport> {
    let classes = predict_quality(dqc_nets, ds, indices, batch_size)?;
    quality_report_from_partition(&classes, dse_nets, ds, indices, clip, batch_size)
}

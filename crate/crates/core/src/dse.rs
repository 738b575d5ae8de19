//! Device state estimation: input preprocessing, the 5-state classifier
//! wrappers, ensemble evaluation, and the training-condition matrix
//! experiment (noiseless / per-noise / combined training data crossed with
//! the two classifier architectures).

use ndarray::{Array2, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_gradient_batch, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{train_models, Network, NetworkSpec, TrainConfig, TrainHistory};
use crate::noise::NoiseKind;
use crate::seed;
use crate::sim::{StateCode, StateLabel, STATE_COUNT};
use crate::stats;

/// Lower clip percentile used when preprocessing is enabled.
pub const CLIP_LO_PERCENTILE: f64 = 2.0;
/// Upper clip percentile used when preprocessing is enabled.
pub const CLIP_HI_PERCENTILE: f64 = 98.0;
/// Standard-deviation floor: flatter images standardize to zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-image normalization: optional percentile clipping of extreme values,
/// then standardization to zero mean and unit (population) variance. A
/// constant image maps to zeros via the std floor.
pub fn preprocess<F: Float>(image: &Array2<F>, clip: bool) -> Array2<F> {
    let mut out = image.clone();
    if clip {
        let values: Vec<F> = out.iter().copied().collect();
        let lo = stats::percentile(&values, CLIP_LO_PERCENTILE);
        let hi = stats::percentile(&values, CLIP_HI_PERCENTILE);
        out.mapv_inplace(|v| v.max(lo).min(hi));
    }
    let values: Vec<F> = out.iter().copied().collect();
    let mu = stats::mean(&values);
    let sigma = stats::std_pop(&values);
    if sigma.to_f64_lossy() < STD_FLOOR {
        return Array2::zeros(image.dim());
    }
    out.mapv_inplace(|v| (v - mu) / sigma);
    out
}

/// [`preprocess`] applied to every image of a (N, C, H, W) batch.
pub fn preprocess_batch<F: Float>(x: &Array4<F>, clip: bool) -> Array4<F> {
    let mut out = x.clone();
    for mut img in out.axis_iter_mut(Axis(0)) {
        for mut chan in img.axis_iter_mut(Axis(0)) {
            let plane = chan.to_owned();
            chan.assign(&preprocess(&plane, clip));
        }
    }
    out
}

/// Runs one already-preprocessed image through a 5-state classifier.
pub fn predict_state<F: Float>(net: &Network<F>, image: &Array2<F>) -> Result<StateLabel<F>> {
    let (h, w) = image.dim();
    let mut x = Array4::zeros((1, 1, h, w));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(image);
    let probs = net.predict(&x)?;
    if probs.ncols() != STATE_COUNT {
        return Err(Error::ShapeMismatch(format!(
            "state classifier emits {} outputs, expected {STATE_COUNT}",
            probs.ncols()
        )));
    }
    let mut p = [F::zero(); STATE_COUNT];
    for k in 0..STATE_COUNT {
        p[k] = probs[[0, k]];
    }
    Ok(StateLabel { p })
}

/// Ensemble-mean prediction for one sample alongside its true state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub true_state: StateCode,
    /// Probabilities averaged over the ensemble.
    pub predicted: [f64; STATE_COUNT],
}

/// Accuracy/MAE pooled over all (model, sample) pairs with a given true state.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StateBreakdown {
    pub count: usize,
    pub accuracy: f64,
    pub mae: f64,
}

/// Ensemble evaluation summary in the paper's value(uncertainty) style.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sample_count: usize,
    pub model_accuracy: Vec<f64>,
    pub model_mae: Vec<f64>,
    pub accuracy_mean: f64,
    /// Sample std over models; zero for a single model.
    pub accuracy_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub per_state: [StateBreakdown; STATE_COUNT],
    pub per_sample: Vec<SamplePrediction>,
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let ok = self.model_accuracy.iter().all(|a| (0.0..=1.0).contains(a))
            && self.model_mae.iter().all(|m| (0.0..=0.8).contains(m))
            && self.accuracy_std >= 0.0
            && self.mae_std >= 0.0;
        if !ok {
            return Err(Error::invalid("evaluation report violates its bounds"));
        }
        Ok(())
    }
}

fn ensemble_stats(xs: &[f64]) -> (f64, f64) {
    if xs.len() < 2 {
        return (xs.first().copied().unwrap_or(0.0), 0.0);
    }
    stats::mean_std(xs)
}

/// Builds the report from per-model probability matrices and fractional
/// labels. Split out from [`evaluate`] so scoring is testable against
/// closed-form fixtures without trained networks.
pub fn evaluate_probs(
    per_model_probs: &[Array2<f64>],
    labels: &Array2<f64>,
) -> Result<EvaluationReport> {
    if per_model_probs.is_empty() {
        return Err(Error::invalid("evaluation needs at least one model"));
    }
    let n = labels.nrows();
    if n == 0 {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    for probs in per_model_probs {
        if probs.dim() != (n, STATE_COUNT) {
            return Err(Error::ShapeMismatch(format!(
                "model emitted {:?}, labels are {:?}",
                probs.dim(),
                labels.dim()
            )));
        }
    }

    let true_states: Vec<usize> = labels
        .rows()
        .into_iter()
        .map(|r| stats::argmax(r.as_slice().unwrap()))
        .collect();

    let mut model_accuracy = Vec::with_capacity(per_model_probs.len());
    let mut model_mae = Vec::with_capacity(per_model_probs.len());
    let mut per_state_hits = [0usize; STATE_COUNT];
    let mut per_state_mae = [0.0f64; STATE_COUNT];
    let mut per_state_n = [0usize; STATE_COUNT];
    let mut mean_probs = Array2::<f64>::zeros((n, STATE_COUNT));

    for probs in per_model_probs {
        let mut hits = 0usize;
        let mut mae_sum = 0.0;
        for (i, row) in probs.rows().into_iter().enumerate() {
            let pred = stats::argmax(row.as_slice().unwrap());
            let hit = pred == true_states[i];
            let mae: f64 = row
                .iter()
                .zip(labels.row(i).iter())
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / STATE_COUNT as f64;
            hits += hit as usize;
            mae_sum += mae;
            let s = true_states[i];
            per_state_hits[s] += hit as usize;
            per_state_mae[s] += mae;
            per_state_n[s] += 1;
        }
        model_accuracy.push(hits as f64 / n as f64);
        model_mae.push(mae_sum / n as f64);
        mean_probs += probs;
    }
    mean_probs /= per_model_probs.len() as f64;

    let (accuracy_mean, accuracy_std) = ensemble_stats(&model_accuracy);
    let (mae_mean, mae_std) = ensemble_stats(&model_mae);
    let per_state = std::array::from_fn(|s| StateBreakdown {
        count: per_state_n[s] / per_model_probs.len(),
        accuracy: if per_state_n[s] > 0 {
            per_state_hits[s] as f64 / per_state_n[s] as f64
        } else {
            0.0
        },
        mae: if per_state_n[s] > 0 { per_state_mae[s] / per_state_n[s] as f64 } else { 0.0 },
    });
    let per_sample = (0..n)
        .map(|i| SamplePrediction {
            true_state: StateCode::from_index(true_states[i]).unwrap(),
            predicted: std::array::from_fn(|k| mean_probs[[i, k]]),
        })
        .collect();

    let report = EvaluationReport {
        sample_count: n,
        model_accuracy,
        model_mae,
        accuracy_mean,
        accuracy_std,
        mae_mean,
        mae_std,
        per_state,
        per_sample,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluates an ensemble on dataset records, preprocessing inputs the same
/// way the models were trained.
pub fn evaluate<F: Float>(
    nets: &[Network<F>],
    ds: &Dataset,
    indices: &[usize],
    clip: bool,
    batch_size: usize,
) -> Result<EvaluationReport> {
    if nets.is_empty() {
        return Err(Error::invalid("evaluation needs at least one model"));
    }
    if indices.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let (x_raw, y) = load_gradient_batch::<F>(ds, indices)?;
    let x = preprocess_batch(&x_raw, clip);
    let labels = y.mapv(|v| v.to_f64_lossy());

    let per_model: Vec<Array2<f64>> = nets
        .par_iter()
        .map(|net| {
            let mut probs = Array2::<f64>::zeros((indices.len(), STATE_COUNT));
            let mut row = 0;
            for chunk in (0..indices.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
                let xb = x.select(Axis(0), chunk);
                let pb = net.predict(&xb)?;
                for r in pb.rows() {
                    for k in 0..STATE_COUNT {
                        probs[[row, k]] = r[k].to_f64_lossy();
                    }
                    row += 1;
                }
            }
            Ok(probs)
        })
        .collect::<Result<_>>()?;
    evaluate_probs(&per_model, &labels)
}

/// One column of the Fig. 2b-style comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainCondition {
    /// A: noiseless training data, raw inputs.
    Noiseless,
    /// A_proc: noiseless training data, clip preprocessing.
    NoiselessProc,
    /// B-F: exactly one noise channel in the training data.
    PerNoise(NoiseKind),
    /// G: the standard noise combination, architecture tuned on clean data.
    Combined,
    /// G_opt: the same data through the architecture re-tuned for noise.
    CombinedOpt,
}

impl TrainCondition {
    pub const ALL: [TrainCondition; 9] = [
        TrainCondition::Noiseless,
        TrainCondition::NoiselessProc,
        TrainCondition::PerNoise(NoiseKind::DotJumps),
        TrainCondition::PerNoise(NoiseKind::CoulombPeak),
        TrainCondition::PerNoise(NoiseKind::Pink),
        TrainCondition::PerNoise(NoiseKind::White),
        TrainCondition::PerNoise(NoiseKind::SensorJumps),
        TrainCondition::Combined,
        TrainCondition::CombinedOpt,
    ];

    /// Column label; per-noise conditions take B-F in pipeline order.
    pub fn label(self) -> &'static str {
        match self {
            TrainCondition::Noiseless => "A",
            TrainCondition::NoiselessProc => "A_proc",
            TrainCondition::PerNoise(NoiseKind::DotJumps) => "B",
            TrainCondition::PerNoise(NoiseKind::CoulombPeak) => "C",
            TrainCondition::PerNoise(NoiseKind::Pink) => "D",
            TrainCondition::PerNoise(NoiseKind::White) => "E",
            TrainCondition::PerNoise(NoiseKind::SensorJumps) => "F",
            TrainCondition::Combined => "G",
            TrainCondition::CombinedOpt => "G_opt",
        }
    }

    pub fn dataset_kind(self) -> DatasetKind {
        match self {
            TrainCondition::Noiseless | TrainCondition::NoiselessProc => DatasetKind::Noiseless,
            TrainCondition::PerNoise(k) => DatasetKind::PerNoise(k),
            TrainCondition::Combined | TrainCondition::CombinedOpt => DatasetKind::Combined,
        }
    }

    pub fn architecture(self) -> NetworkSpec {
        match self {
            TrainCondition::CombinedOpt => NetworkSpec::noisy_dse(),
            _ => NetworkSpec::noiseless_dse(),
        }
    }

    /// Only the A_proc column clips extreme values.
    pub fn clip(self) -> bool {
        self == TrainCondition::NoiselessProc
    }
}

/// Trains `models` state classifiers on the dataset's train split with
/// per-model derived seeds.
pub fn train_ensemble<F: Float>(
    spec: &NetworkSpec,
    ds: &Dataset,
    clip: bool,
    models: usize,
    master_seed: u64,
    train_cfg: &TrainConfig,
) -> Result<(Vec<Network<F>>, Vec<TrainHistory>)> {
    let splits = ds.splits();
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::invalid("dataset splits leave no training or validation data"));
    }
    let (x_train_raw, y_train) = load_gradient_batch::<F>(ds, &splits.train)?;
    let (x_val_raw, y_val) = load_gradient_batch::<F>(ds, &splits.val)?;
    let x_train = preprocess_batch(&x_train_raw, clip);
    let x_val = preprocess_batch(&x_val_raw, clip);
    train_models(spec, &x_train, &y_train, &x_val, &y_val, models, master_seed, train_cfg)
}

/// Probabilities averaged over an ensemble, in `f64` regardless of the
/// network scalar. Inputs must already be preprocessed.
pub fn ensemble_mean_probs<F: Float>(
    nets: &[Network<F>],
    x: &Array4<F>,
    batch_size: usize,
) -> Result<Array2<f64>> {
    if nets.is_empty() {
        return Err(Error::invalid("ensemble is empty"));
    }
    let n = x.dim().0;
    let k = nets[0].spec.outputs;
    let mut mean = Array2::<f64>::zeros((n, k));
    for net in nets {
        if net.spec.outputs != k {
            return Err(Error::ShapeMismatch("ensemble members disagree on outputs".into()));
        }
        let mut at = 0;
        while at < n {
            let hi = (at + batch_size.max(1)).min(n);
            let xb = x.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
            let probs = net.predict(&xb)?;
            for (i, row) in probs.rows().into_iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    mean[[at + i, j]] += v.to_f64_lossy();
                }
            }
            at = hi;
        }
    }
    mean /= nets.len() as f64;
    Ok(mean)
}

/// One matrix cell: per-model held-out metrics plus box statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixCell {
    pub label: String,
    pub condition: TrainCondition,
    pub accuracies: Vec<f64>,
    pub maes: Vec<f64>,
    pub accuracy_box: stats::BoxStats,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

impl MatrixCell {
    /// Rank correlation between per-model accuracy and MAE; expected to be
    /// negative for any usefully trained cell.
    pub fn accuracy_mae_spearman(&self) -> f64 {
        stats::spearman(&self.accuracies, &self.maes)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<MatrixCell>,
    pub models_per_cell: usize,
    pub test_samples: usize,
}

impl MatrixReport {
    pub fn cell(&self, label: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.label == label)
    }
}

/// Runs the training-condition comparison: every requested condition is
/// trained `models_per_cell` times on its own dataset and scored on the
/// shared held-out test set.
pub fn run_matrix_experiment<'a, F: Float>(
    conditions: &[TrainCondition],
    lookup: impl Fn(DatasetKind) -> Option<&'a Dataset>,
    test: &Dataset,
    test_indices: &[usize],
    models_per_cell: usize,
    master_seed: u64,
    train_cfg: &TrainConfig,
    eval_batch: usize,
) -> Result<MatrixReport> {
    if test_indices.is_empty() {
        return Err(Error::invalid("matrix experiment needs held-out test samples"));
    }
    let mut cells = Vec::with_capacity(conditions.len());
    for (ci, &condition) in conditions.iter().enumerate() {
        let kind = condition.dataset_kind();
        let ds = lookup(kind).ok_or_else(|| {
            Error::invalid(format!(
                "no dataset provided for condition {} ({})",
                condition.label(),
                kind.name()
            ))
        })?;
        let (nets, _) = train_ensemble::<F>(
            &condition.architecture(),
            ds,
            condition.clip(),
            models_per_cell,
            seed::derive(master_seed, ci as u64),
            train_cfg,
        )?;
        let report = evaluate(&nets, test, test_indices, condition.clip(), eval_batch)?;
        cells.push(MatrixCell {
            label: condition.label().to_string(),
            condition,
            accuracy_box: stats::box_stats(&report.model_accuracy),
            accuracy_mean: report.accuracy_mean,
            accuracy_std: report.accuracy_std,
            mae_mean: report.mae_mean,
            mae_std: report.mae_std,
            accuracies: report.model_accuracy,
            maes: report.model_mae,
        });
    }
    Ok(MatrixReport { cells, models_per_cell, test_samples: test_indices.len() })
}

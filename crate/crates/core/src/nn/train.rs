//! Mini-batch training loop: Adam updates, early stopping on validation loss,
//! and retention of the best-validation weights.

use super::Network;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::seed;
use crate::stats::argmax;
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without a validation-loss improvement before stopping; 0 turns
    /// early stopping off.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            seed: 0,
            patience: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Fraction of rows where prediction and target share the argmax.
fn accuracy<F: Float>(probs: &Array2<F>, targets: &Array2<F>) -> f64 {
    let mut hits = 0usize;
    for (p, t) in probs.rows().into_iter().zip(targets.rows()) {
        if argmax(p.as_slice().unwrap()) == argmax(t.as_slice().unwrap()) {
            hits += 1;
        }
    }
    hits as f64 / probs.nrows() as f64
}

/// Inference-mode loss and accuracy over a whole set, in batches.
pub fn evaluate_batches<F: Float>(
    net: &Network<F>,
    x: &Array4<F>,
    y: &Array2<F>,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = x.dim().0;
    assert_eq!(n, y.nrows());
    let mut loss_sum = 0.0;
    let mut hit_sum = 0.0;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size).min(n);
        let xb = x.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let yb = y.slice(ndarray::s![at..hi, ..]).to_owned();
        let probs = net.predict(&xb)?;
        loss_sum += Network::loss(&probs, &yb).to_f64_lossy() * (hi - at) as f64;
        hit_sum += accuracy(&probs, &yb) * (hi - at) as f64;
        at = hi;
    }
    Ok((loss_sum / n as f64, hit_sum / n as f64))
}

/// Trains in place. Shuffling and dropout are driven by `cfg.seed`, so a run
/// is reproducible; the network is left holding the weights of the epoch with
/// the lowest validation loss.
pub fn train<F: Float>(
    net: &mut Network<F>,
    train_x: &Array4<F>,
    train_y: &Array2<F>,
    val_x: &Array4<F>,
    val_y: &Array2<F>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let n = train_x.dim().0;
    if n == 0 || val_x.dim().0 == 0 {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if train_y.nrows() != n || val_y.nrows() != val_x.dim().0 {
        return Err(Error::ShapeMismatch("targets do not match inputs".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params: Option<Vec<ndarray::ArrayD<F>>> = None;
    let mut since_best = 0usize;
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = seed::rng(seed::derive(cfg.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut hit_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train_x.select(Axis(0), chunk);
            let yb = train_y.select(Axis(0), chunk);
            let dropout_seed = seed::derive(cfg.seed, (1 << 32) + global_step);
            let (probs, cache) = net.forward(&xb, Some(dropout_seed))?;
            let loss = Network::loss(&probs, &yb).to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            hit_sum += accuracy(&probs, &yb) * chunk.len() as f64;
            let grads = net.backward(&xb, &cache, &probs, &yb)?;
            net.adam_step(&grads);
            global_step += 1;
        }

        let (val_loss, val_accuracy) = evaluate_batches(net, val_x, val_y, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hit_sum / n as f64,
            val_loss,
            val_accuracy,
        });

        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params = Some(net.params().to_vec());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        *net.params_mut() = best;
    }
    Ok(history)
}

/// Trains `models` independently seeded copies of `spec` on one dataset.
/// Model `m` initializes and shuffles from streams derived off
/// `derive(master_seed, m)`, so ensembles are reproducible and each member
/// is independent of the ensemble size.
pub fn train_models<F: Float>(
    spec: &super::NetworkSpec,
    train_x: &Array4<F>,
    train_y: &Array2<F>,
    val_x: &Array4<F>,
    val_y: &Array2<F>,
    models: usize,
    master_seed: u64,
    cfg: &TrainConfig,
) -> Result<(Vec<Network<F>>, Vec<TrainHistory>)> {
    if models == 0 {
        return Err(Error::invalid("ensemble needs at least one model"));
    }
    let (_, _, h, w) = train_x.dim();
    let jobs: Vec<u64> = (0..models).map(|m| seed::derive(master_seed, m as u64)).collect();
    let results: Vec<(Network<F>, TrainHistory)> = jobs
        .par_iter()
        .map(|&model_seed| {
            let mut net = Network::build(spec, (h, w), seed::derive(model_seed, 0))?;
            let model_cfg = TrainConfig { seed: seed::derive(model_seed, 1), ..*cfg };
            let history = train(&mut net, train_x, train_y, val_x, val_y, &model_cfg)?;
            Ok((net, history))
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().unzip())
}

//! End-to-end state-estimator tests on generated data: ensemble training,
//! dataset-backed evaluation, and the condition-matrix plumbing.

use qdtune_core::dataset::{generate_dataset, Dataset, DatasetKind, GenerateConfig, SplitSpec};
use qdtune_core::dse::{evaluate, run_matrix_experiment, train_ensemble, TrainCondition};
use qdtune_core::nn::{
    Activation, LayerSpec, LossKind, Network, NetworkSpec, OptimizerKind, TrainConfig,
};
use qdtune_core::noise::{NoiseKind, NoiseMask, NoiseParams};
use qdtune_core::sim::{DeviceRanges, Range, STATE_COUNT};
use qdtune_core::NetScalar;

fn ranges() -> DeviceRanges<f64> {
    DeviceRanges {
        charging_energy: Range::new(1.4, 2.4),
        mutual_charging_energy: Range::new(0.1, 0.8),
        lever_arm_diag: Range::new(0.06, 0.09),
        cross_talk: Range::new(0.1, 0.3),
        sensor_coupling_left: Range::new(0.8, 1.2),
        sensor_coupling_right: Range::new(0.5, 0.9),
        sensor_gate_coupling: Range::new(0.001, 0.004),
        offset: Range::new(-2.0, -1.0),
        merge_ratio_threshold: 0.3,
    }
}

fn noise() -> NoiseParams<f64> {
    NoiseParams {
        white_sigma: 0.03,
        pink_magnitude: 0.3,
        coulomb_a: 0.5,
        coulomb_gmax: 1.0,
        coulomb_vmin: 1.5,
        coulomb_vmin_drift: 0.5,
        sensor_jump_prob: 0.005,
        sensor_jump_sigma: 0.2,
        dot_jump_prob: 0.01,
        dot_jump_rate: 0.6,
        mask: NoiseMask::standard(),
        noise_scale: 1.0,
    }
}

fn cfg(kind: DatasetKind, count: usize) -> GenerateConfig {
    GenerateConfig {
        kind,
        count,
        image_pixels: 16,
        window_span_mv: 60.0,
        occupancy_bound: 10,
        device_ranges: ranges(),
        base_noise: noise(),
        sweep_min: 0.0,
        sweep_max: 7.0,
        center_box_v1: Range::new(-15.0, 90.0),
        center_box_v2: Range::new(-15.0, 90.0),
        thresholds: None,
        split: SplitSpec { train_fraction: 0.8, val_fraction: 0.1, seed: 11 },
    }
}

/// Small stand-in classifier so the tests stay fast; the published
/// architectures are exercised by the matrix test below.
fn micro_spec() -> NetworkSpec {
    NetworkSpec {
        name: "micro".into(),
        layers: vec![
            LayerSpec::Conv { kernel: 3, channels: 16, stride: 1 },
            LayerSpec::Act(Activation::Relu),
            LayerSpec::Conv { kernel: 3, channels: 16, stride: 2 },
            LayerSpec::Act(Activation::Relu),
            LayerSpec::GlobalAvgPool,
        ],
        outputs: STATE_COUNT,
        optimizer: OptimizerKind::Adam,
        learning_rate: 5e-3,
        loss: LossKind::CrossEntropy,
    }
}

fn learn_cfg(count: usize) -> GenerateConfig {
    GenerateConfig { image_pixels: 20, ..cfg(DatasetKind::Noiseless, count) }
}

#[test]
fn evaluation_is_deterministic_and_scores_probability_rows() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg(DatasetKind::Noiseless, 30), 7, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let indices: Vec<usize> = (0..ds.count()).collect();

    let net: Network<NetScalar> =
        Network::build(&micro_spec(), ds.image_shape(), 42).unwrap();
    let a = evaluate(&[net.clone()], &ds, &indices, false, 8).unwrap();
    let b = evaluate(&[net.clone()], &ds, &indices, false, 8).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.sample_count, 30);
    assert_eq!(a.per_sample.len(), 30);
    for s in &a.per_sample {
        let total: f64 = s.predicted.iter().sum();
        assert!((total - 1.0).abs() < 1e-5, "ensemble probabilities sum to {total}");
    }
    let per_state_total: usize = a.per_state.iter().map(|b| b.count).sum();
    assert_eq!(per_state_total, 30);

    // a duplicated model is a degenerate ensemble: zero spread, same mean
    let twin = evaluate(&[net.clone(), net], &ds, &indices, false, 8).unwrap();
    assert_eq!(twin.accuracy_std, 0.0);
    assert_eq!(twin.mae_std, 0.0);
    assert_eq!(twin.accuracy_mean, a.accuracy_mean);
    assert_eq!(twin.model_accuracy.len(), 2);
}

#[test]
fn ensembles_learn_the_state_taxonomy_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&learn_cfg(300), 21, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let train_cfg = TrainConfig { epochs: 30, batch_size: 16, seed: 0, patience: 0 };

    let (nets, hist) =
        train_ensemble::<NetScalar>(&micro_spec(), &ds, false, 2, 5, &train_cfg).unwrap();
    assert_eq!(nets.len(), 2);
    assert_eq!(hist.len(), 2);
    let test = ds.splits().test;
    let report = evaluate(&nets, &ds, &test, false, 16).unwrap();
    report.validate().unwrap();
    assert!(
        report.accuracy_mean > 0.5,
        "trained ensemble should beat 20% chance clearly, got {}",
        report.accuracy_mean
    );
    assert!(report.mae_mean < 0.25, "MAE should beat the 0.32 uniform-predictor bound");

    // bitwise repeatability of the whole train-and-evaluate pipeline
    let (nets2, _) =
        train_ensemble::<NetScalar>(&micro_spec(), &ds, false, 2, 5, &train_cfg).unwrap();
    let report2 = evaluate(&nets2, &ds, &test, false, 16).unwrap();
    assert_eq!(report.model_accuracy, report2.model_accuracy);
    assert_eq!(report.model_mae, report2.model_mae);
}

#[test]
fn degenerate_evaluation_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&cfg(DatasetKind::Noiseless, 10), 3, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let net: Network<NetScalar> = Network::build(&micro_spec(), ds.image_shape(), 1).unwrap();
    assert!(evaluate::<NetScalar>(&[], &ds, &[0, 1], false, 4).is_err());
    assert!(evaluate(&[net], &ds, &[], false, 4).is_err());
}

#[test]
fn matrix_experiment_trains_the_published_architectures_per_condition() {
    let root = tempfile::tempdir().unwrap();
    let specs = [
        (DatasetKind::Noiseless, "clean"),
        (DatasetKind::PerNoise(NoiseKind::White), "white"),
        (DatasetKind::Combined, "combined"),
    ];
    let mut dirs = Vec::new();
    for (kind, name) in specs {
        let dir = root.path().join(name);
        std::fs::create_dir(&dir).unwrap();
        generate_dataset(&cfg(kind, 40), 31, &dir).unwrap();
        dirs.push((kind, Dataset::open(&dir).unwrap()));
    }
    let lookup = |kind: DatasetKind| dirs.iter().find(|(k, _)| *k == kind).map(|(_, d)| d);
    let combined = lookup(DatasetKind::Combined).unwrap();
    let test = combined.splits().test;
    let conditions = [
        TrainCondition::Noiseless,
        TrainCondition::NoiselessProc,
        TrainCondition::PerNoise(NoiseKind::White),
        TrainCondition::CombinedOpt,
    ];
    let train_cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 0, patience: 0 };

    let report = run_matrix_experiment::<NetScalar>(
        &conditions, lookup, combined, &test, 2, 77, &train_cfg, 8,
    )
    .unwrap();
    assert_eq!(report.models_per_cell, 2);
    assert_eq!(report.test_samples, test.len());
    let labels: Vec<&str> = report.cells.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["A", "A_proc", "E", "G_opt"]);
    for cell in &report.cells {
        assert_eq!(cell.accuracies.len(), 2);
        assert_eq!(cell.maes.len(), 2);
        let b = &cell.accuracy_box;
        assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
        assert!((0.0..=1.0).contains(&cell.accuracy_mean));
        assert!((0.0..=0.8).contains(&cell.mae_mean));
    }
    assert!(report.cell("G_opt").is_some());
    assert!(report.cell("Z").is_none());

    // same master seed reruns bitwise identically
    let report2 = run_matrix_experiment::<NetScalar>(
        &conditions, lookup, combined, &test, 2, 77, &train_cfg, 8,
    )
    .unwrap();
    for (a, b) in report.cells.iter().zip(report2.cells.iter()) {
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.maes, b.maes);
    }

    // a condition whose dataset is missing fails by label
    let err = run_matrix_experiment::<NetScalar>(
        &[TrainCondition::Combined],
        |kind| if kind == DatasetKind::Combined { None } else { lookup(kind) },
        combined,
        &test,
        1,
        77,
        &train_cfg,
        8,
    )
    .unwrap_err();
    assert!(err.to_string().contains('G'), "{err}");
}

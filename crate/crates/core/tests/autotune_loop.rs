//! End-to-end tuning-loop runs against the simulated device: threshold-band
//! routing, optimizer convergence from a wrong state into the target, and
//! bit-level repeatability of the step log.

use std::cell::Cell;

use qdtune_core::autotune::{
    run_tuning, Action, Environment, QualityGate, SimulatedEnvironment, StateEstimator,
    TuneConfig, CONVERGED, LOW_QUALITY,
};
use qdtune_core::dqc::QualityClass;
use qdtune_core::noise::{NoiseMask, NoiseParams};
use qdtune_core::sim::{
    classify_occupancy, compute_charge_config, label_scan, simulate_scan, DeviceParams,
    StabilityScan, StateCode, StateLabel, VoltageWindow,
};
use qdtune_core::Result;

fn dense_device() -> DeviceParams<f64> {
    DeviceParams {
        charging_energy_left: 1.8,
        charging_energy_right: 2.0,
        mutual_charging_energy: 0.4,
        lever_arm: [[0.075, 0.015], [0.0156, 0.078]],
        cross_talk: [0.2, 0.2],
        sensor_coupling: [1.0, 0.7],
        sensor_gate_coupling: [0.002, 0.003],
        offset_left: -1.5,
        offset_right: -1.5,
        merge_ratio_threshold: 0.3,
    }
}

fn standard_noise(scale: f64) -> NoiseParams<f64> {
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
        noise_scale: scale,
    }
}

fn silent_noise() -> NoiseParams<f64> {
    NoiseParams { mask: NoiseMask::none(), ..standard_noise(0.0) }
}

/// Environment wrapper that mirrors the live noise scale into a shared cell
/// so a threshold gate can read it, the way a calibrated quality net tracks
/// the true scan quality.
struct MirroredEnv<'a> {
    inner: SimulatedEnvironment,
    mirror: &'a Cell<f64>,
}

impl<'a> MirroredEnv<'a> {
    fn new(inner: SimulatedEnvironment, mirror: &'a Cell<f64>) -> MirroredEnv<'a> {
        mirror.set(inner.noise_scale());
        MirroredEnv { inner, mirror }
    }
}

impl Environment for MirroredEnv<'_> {
    fn measure(&mut self, window: &VoltageWindow<f64>) -> Result<ndarray::Array2<f64>> {
        self.inner.measure(window)
    }
    fn noise_scale(&self) -> f64 {
        self.inner.noise_scale()
    }
    fn set_noise_scale(&mut self, scale: f64) {
        self.inner.set_noise_scale(scale);
        self.mirror.set(self.inner.noise_scale());
    }
}

/// Grades scans by the environment's true noise scale against a fixed band:
/// at or below `lower` is high quality, at or below `upper` moderate, above
/// that low.
struct BandGate<'a> {
    scale: &'a Cell<f64>,
    lower: f64,
    upper: f64,
}

impl QualityGate for BandGate<'_> {
    fn classify(
        &self,
        _window: &VoltageWindow<f64>,
        _gradient: &ndarray::Array2<f64>,
    ) -> Result<QualityClass> {
        let s = self.scale.get();
        Ok(if s <= self.lower {
            QualityClass::High
        } else if s <= self.upper {
            QualityClass::Moderate
        } else {
            QualityClass::Low
        })
    }
}

/// Oracle estimator: re-simulates the window and reports the exact state
/// histogram.
struct TrueWindowEstimator {
    device: DeviceParams<f64>,
    bound: u32,
}

impl StateEstimator for TrueWindowEstimator {
    fn estimate(
        &self,
        window: &VoltageWindow<f64>,
        _gradient: &ndarray::Array2<f64>,
    ) -> Result<StateLabel<f64>> {
        let scan: StabilityScan<f64> = simulate_scan(&self.device, window, self.bound)?;
        Ok(label_scan(&scan))
    }
}

fn loop_cfg() -> TuneConfig {
    TuneConfig { window_pixels: 21, max_steps: 60, ..TuneConfig::default() }
}

#[test]
fn moderate_band_recalibrates_into_the_high_band() {
    let device = dense_device();
    let cell = Cell::new(0.0);
    let mut env =
        MirroredEnv::new(SimulatedEnvironment::new(device.clone(), standard_noise(2.0), 10, 99), &cell);
    let gate = BandGate { scale: &cell, lower: 1.0, upper: 3.0 };
    let estimator = TrueWindowEstimator { device, bound: 10 };
    let target = StateLabel::one_hot(StateCode::DoubleDot);

    let outcome =
        run_tuning(&gate, &estimator, &mut env, &target, &loop_cfg(), (65.0, 65.0), 3).unwrap();
    let actions: Vec<Action> = outcome.state.log.iter().map(|r| r.action).collect();
    assert_eq!(actions, vec![Action::Recalibrate, Action::ClassifyAndOptimize]);
    assert_eq!(outcome.state.log[0].noise_scale, 2.0);
    assert_eq!(outcome.state.log[1].noise_scale, 1.0);
    assert_eq!(outcome.state.budget, 2);
    assert_eq!(outcome.termination, CONVERGED);
    assert!(outcome.converged && outcome.succeeded, "window already sat in the target state");
}

#[test]
fn scales_above_the_upper_threshold_terminate_immediately() {
    let device = dense_device();
    let cell = Cell::new(0.0);
    let mut env =
        MirroredEnv::new(SimulatedEnvironment::new(device.clone(), standard_noise(7.0), 10, 5), &cell);
    let gate = BandGate { scale: &cell, lower: 1.0, upper: 3.0 };
    let estimator = TrueWindowEstimator { device, bound: 10 };
    let target = StateLabel::one_hot(StateCode::DoubleDot);

    let outcome =
        run_tuning(&gate, &estimator, &mut env, &target, &loop_cfg(), (65.0, 65.0), 3).unwrap();
    assert_eq!(outcome.steps, 1);
    assert_eq!(outcome.termination, LOW_QUALITY);
    assert!(!outcome.converged);
}

#[test]
fn optimizer_walks_from_left_dot_into_double_dot() {
    let device = dense_device();
    let run = || {
        let mut env = SimulatedEnvironment::new(device.clone(), silent_noise(), 10, 17);
        let cell = Cell::new(env.noise_scale());
        let gate = BandGate { scale: &cell, lower: 1.0, upper: 3.0 };
        let estimator = TrueWindowEstimator { device: device.clone(), bound: 10 };
        let target = StateLabel::one_hot(StateCode::DoubleDot);
        run_tuning(&gate, &estimator, &mut env, &target, &loop_cfg(), (60.0, 0.0), 3).unwrap()
    };
    let outcome = run();
    assert!(outcome.converged, "termination was {}", outcome.termination);
    assert!(outcome.succeeded);
    assert!(outcome.steps <= 50, "took {} steps", outcome.steps);
    assert!(outcome.state.log.iter().all(|r| r.action == Action::ClassifyAndOptimize));

    // the loop really moved the voltages into the double-dot region
    let occ = compute_charge_config(&device, outcome.state.v1, outcome.state.v2, 10).unwrap();
    assert_eq!(classify_occupancy(&device, occ), StateCode::DoubleDot);

    // identical seeds replay the identical action log
    let again = run();
    assert_eq!(
        serde_json::to_string(&outcome.state).unwrap(),
        serde_json::to_string(&again.state).unwrap()
    );
}

#[test]
fn starting_inside_the_target_state_converges_on_step_one() {
    let device = dense_device();
    let mut env = SimulatedEnvironment::new(device.clone(), silent_noise(), 10, 3);
    let cell = Cell::new(env.noise_scale());
    let gate = BandGate { scale: &cell, lower: 1.0, upper: 3.0 };
    let estimator = TrueWindowEstimator { device, bound: 10 };
    let target = StateLabel::one_hot(StateCode::DoubleDot);

    let outcome =
        run_tuning(&gate, &estimator, &mut env, &target, &loop_cfg(), (65.0, 65.0), 3).unwrap();
    assert_eq!(outcome.steps, 1);
    assert!(outcome.converged && outcome.succeeded);
    assert_eq!(outcome.state.log[0].fitness, Some(0.0));
    assert!(outcome.state.optimizer.is_none(), "no simplex needed");
    assert_eq!(env.measurements(), 1, "one scan, no probes");
}

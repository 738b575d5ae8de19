//! Gated autotuning loop over a simulated device, plus the sliding-window
//! map-evaluation harness built on the same state and quality heads.
//!
//! One `tune_step` is one trip around the loop: raster a window at the current
//! plunger voltages, grade the scan, then either optimize the voltages (high
//! quality), recalibrate the environment (moderate), or stop (low). Voltage
//! optimization is a persistent Nelder-Mead simplex over (V_P1, V_P2) advanced
//! one iteration per step; its probe scans reuse the step's quality verdict,
//! only the centered scan of each step is graded.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::gradient_image;
use crate::dqc::QualityClass;
use crate::dse::{ensemble_mean_probs, preprocess};
use crate::error::{Error, Result};
use crate::float::{fl, Float};
use crate::nn::Network;
use crate::noise::{apply_noise, NoiseParams};
use crate::seed;
use crate::sim::{
    simulate_scan, DeviceParams, Range, StabilityScan, StateCode, StateLabel, VoltageWindow,
    STATE_COUNT,
};
use crate::stats;

pub const BUDGET_EXHAUSTED: &str = "recalibration budget exhausted";
pub const LOW_QUALITY: &str = "low quality scan";
pub const CONVERGED: &str = "converged";
pub const STEP_LIMIT: &str = "step limit reached";

/// Loop routing outcome for one scan: optimize on high quality, recalibrate on
/// moderate, terminate on low (or on an exhausted recalibration budget).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    ClassifyAndOptimize,
    Recalibrate,
    Terminate,
}

/// Grades one measured window. The window geometry rides along so oracle
/// implementations (tests, calibration baselines) can consult ground truth;
/// network-backed gates ignore it.
pub trait QualityGate {
    fn classify(&self, window: &VoltageWindow<f64>, gradient: &Array2<f64>) -> Result<QualityClass>;
}

/// Estimates the state mixture of one measured window.
pub trait StateEstimator {
    fn estimate(&self, window: &VoltageWindow<f64>, gradient: &Array2<f64>) -> Result<StateLabel<f64>>;
}

/// Something that can raster a voltage window and report a sensor map, with a
/// noise scale the loop may turn down when it recalibrates.
pub trait Environment {
    fn measure(&mut self, window: &VoltageWindow<f64>) -> Result<Array2<f64>>;
    fn noise_scale(&self) -> f64;
    fn set_noise_scale(&mut self, scale: f64);
}

/// Simulated device behind the `Environment` trait. Every measurement draws a
/// fresh seed stream, so rescanning the same window gives new noise while a
/// fresh environment with the same seed replays the identical sequence.
#[derive(Clone, Debug)]
pub struct SimulatedEnvironment {
    pub device: DeviceParams<f64>,
    pub noise: NoiseParams<f64>,
    pub occupancy_bound: u32,
    scale: f64,
    seed: u64,
    measurements: u64,
}

impl SimulatedEnvironment {
    /// The starting scale comes from `noise.noise_scale`; recalibrations
    /// overwrite it from there.
    pub fn new(
        device: DeviceParams<f64>,
        noise: NoiseParams<f64>,
        occupancy_bound: u32,
        seed: u64,
    ) -> SimulatedEnvironment {
        SimulatedEnvironment {
            device,
            scale: noise.noise_scale,
            noise,
            occupancy_bound,
            seed,
            measurements: 0,
        }
    }

    /// Number of scans taken so far (loop measurements and optimizer probes).
    pub fn measurements(&self) -> u64 {
        self.measurements
    }
}

impl Environment for SimulatedEnvironment {
    fn measure(&mut self, window: &VoltageWindow<f64>) -> Result<Array2<f64>> {
        let scan = simulate_scan(&self.device, window, self.occupancy_bound)?;
        let mut params = self.noise;
        params.noise_scale = self.scale;
        let stream = seed::derive(self.seed, self.measurements);
        self.measurements += 1;
        apply_noise(&self.device, &scan, &params, stream, self.occupancy_bound)
    }

    fn noise_scale(&self) -> f64 {
        self.scale
    }

    fn set_noise_scale(&mut self, scale: f64) {
        self.scale = scale.max(0.0);
    }
}

/// Runs a gradient image through an ensemble and returns the mean output row.
fn image_probs<F: Float>(nets: &[Network<F>], gradient: &Array2<f64>, clip: bool) -> Result<Vec<f64>> {
    let pre = preprocess(gradient, clip);
    let (h, w) = pre.dim();
    let mut x = Array4::<F>::zeros((1, 1, h, w));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(&pre.mapv(|v| fl::<F>(v)));
    let probs = ensemble_mean_probs(nets, &x, 1)?;
    Ok(probs.row(0).to_vec())
}

/// Quality gate backed by a trained classifier ensemble.
pub struct EnsembleGate<'a, F: Float> {
    pub nets: &'a [Network<F>],
}

impl<F: Float> QualityGate for EnsembleGate<'_, F> {
    fn classify(&self, _window: &VoltageWindow<f64>, gradient: &Array2<f64>) -> Result<QualityClass> {
        let probs = image_probs(self.nets, gradient, false)?;
        if probs.len() != QualityClass::ALL.len() {
            return Err(Error::ShapeMismatch(format!(
                "quality gate expects {} outputs, the ensemble emits {}",
                QualityClass::ALL.len(),
                probs.len()
            )));
        }
        Ok(QualityClass::ALL[stats::argmax(&probs)])
    }
}

/// State estimator backed by a trained classifier ensemble.
pub struct EnsembleEstimator<'a, F: Float> {
    pub nets: &'a [Network<F>],
    /// Percentile-clip the gradient before standardization.
    pub clip: bool,
}

impl<F: Float> StateEstimator for EnsembleEstimator<'_, F> {
    fn estimate(&self, _window: &VoltageWindow<f64>, gradient: &Array2<f64>) -> Result<StateLabel<f64>> {
        let probs = image_probs(self.nets, gradient, self.clip)?;
        if probs.len() != STATE_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "state estimator expects {STATE_COUNT} outputs, the ensemble emits {}",
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("ensemble emitted a non-positive probability mass"));
        }
        let mut p = [0.0f64; STATE_COUNT];
        for (out, &x) in p.iter_mut().zip(probs.iter()) {
            *out = x / total;
        }
        Ok(StateLabel { p })
    }
}

/// Euclidean distance between two state mixtures.
pub fn label_distance(a: &StateLabel<f64>, b: &StateLabel<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..STATE_COUNT {
        let d = a.p[i] - b.p[i];
        acc += d * d;
    }
    acc.sqrt()
}

/// One simplex vertex: a voltage pair, its fitness, and the state prediction
/// the fitness came from (kept so convergence can report the winning label
/// without a fresh measurement).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Vertex {
    pub v: (f64, f64),
    pub fitness: f64,
    pub label: StateLabel<f64>,
}

/// Persistent two-dimensional Nelder-Mead state. `step` runs exactly one
/// iteration: reflect, then expand, contract, or shrink per the standard
/// rules. The evaluation callback may move a requested point (bounds
/// clamping); the simplex stores whatever point was actually evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NelderMead {
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub sigma: f64,
    simplex: [Vertex; 3],
}

impl NelderMead {
    /// Standard coefficients: reflect 1, expand 2, contract 0.5, shrink 0.5.
    pub fn from_vertices(simplex: [Vertex; 3]) -> Result<NelderMead> {
        if simplex.iter().any(|x| !x.fitness.is_finite()) {
            return Err(Error::invalid("simplex fitness must be finite"));
        }
        let mut nm = NelderMead { alpha: 1.0, gamma: 2.0, rho: 0.5, sigma: 0.5, simplex };
        nm.sort();
        Ok(nm)
    }

    fn sort(&mut self) {
        self.simplex.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
    }

    pub fn best(&self) -> &Vertex {
        &self.simplex[0]
    }

    pub fn vertices(&self) -> &[Vertex; 3] {
        &self.simplex
    }

    /// Longest edge of the simplex, mV.
    pub fn diameter(&self) -> f64 {
        let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let sx = &self.simplex;
        d(sx[0].v, sx[1].v).max(d(sx[0].v, sx[2].v)).max(d(sx[1].v, sx[2].v))
    }

    pub fn step(&mut self, eval: &mut impl FnMut((f64, f64)) -> Result<Vertex>) -> Result<()> {
        self.sort();
        let [best, second, worst] = self.simplex;
        let c = ((best.v.0 + second.v.0) / 2.0, (best.v.1 + second.v.1) / 2.0);
        let along = |t: f64| (c.0 + t * (c.0 - worst.v.0), c.1 + t * (c.1 - worst.v.1));

        let reflected = eval(along(self.alpha))?;
        let replacement = if reflected.fitness < best.fitness {
            let expanded = eval(along(self.gamma))?;
            Some(if expanded.fitness < reflected.fitness { expanded } else { reflected })
        } else if reflected.fitness < second.fitness {
            Some(reflected)
        } else if reflected.fitness < worst.fitness {
            // outside contraction, toward the point actually evaluated
            let v = (c.0 + self.rho * (reflected.v.0 - c.0), c.1 + self.rho * (reflected.v.1 - c.1));
            let contracted = eval(v)?;
            if contracted.fitness <= reflected.fitness { Some(contracted) } else { None }
        } else {
            let v = (c.0 + self.rho * (worst.v.0 - c.0), c.1 + self.rho * (worst.v.1 - c.1));
            let contracted = eval(v)?;
            if contracted.fitness < worst.fitness { Some(contracted) } else { None }
        };
        match replacement {
            Some(vertex) => self.simplex[2] = vertex,
            None => {
                for i in 1..3 {
                    let v = (
                        best.v.0 + self.sigma * (self.simplex[i].v.0 - best.v.0),
                        best.v.1 + self.sigma * (self.simplex[i].v.1 - best.v.1),
                    );
                    self.simplex[i] = eval(v)?;
                }
            }
        }
        if self.simplex.iter().any(|x| !x.fitness.is_finite()) {
            return Err(Error::invalid("simplex fitness must be finite"));
        }
        self.sort();
        Ok(())
    }
}

/// Knobs of the tuning loop. Voltages are in mV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub window_span_mv: f64,
    pub window_pixels: usize,
    /// Multiplier applied to the environment noise scale on a recalibration.
    pub recalibration_factor: f64,
    /// Optimization stops once the best prediction-to-target distance drops
    /// below this.
    pub fitness_threshold: f64,
    /// ... or the simplex diameter shrinks below this many mV.
    pub simplex_tolerance_mv: f64,
    /// Edge length of the initial simplex.
    pub initial_step_mv: f64,
    pub bounds_v1: Range<f64>,
    pub bounds_v2: Range<f64>,
    /// Hard step cap for `run_tuning`.
    pub max_steps: usize,
}

impl Default for TuneConfig {
    fn default() -> TuneConfig {
        TuneConfig {
            window_span_mv: 60.0,
            window_pixels: 30,
            recalibration_factor: 0.5,
            fitness_threshold: 0.2,
            simplex_tolerance_mv: 1.0,
            initial_step_mv: 15.0,
            bounds_v1: Range::new(-15.0, 90.0),
            bounds_v2: Range::new(-15.0, 90.0),
            max_steps: 100,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_span_mv > 0.0) || self.window_pixels < 2 {
            return Err(Error::invalid("tune window must span voltage over at least 2 pixels"));
        }
        if !(self.recalibration_factor > 0.0 && self.recalibration_factor <= 1.0) {
            return Err(Error::invalid("recalibration factor must lie in (0, 1]"));
        }
        if !(self.fitness_threshold > 0.0) || !(self.simplex_tolerance_mv > 0.0) {
            return Err(Error::invalid("convergence thresholds must be positive"));
        }
        if !(self.initial_step_mv > 0.0) {
            return Err(Error::invalid("initial simplex step must be positive"));
        }
        self.bounds_v1.validate()?;
        self.bounds_v2.validate()?;
        Ok(())
    }
}

/// What one trip around the loop saw and did.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Plunger voltages the window was centered at, mV.
    pub voltages: (f64, f64),
    /// Environment noise scale when the window was measured.
    pub noise_scale: f64,
    pub quality: QualityClass,
    /// State estimate for the scan; only high-quality scans are estimated.
    pub prediction: Option<StateLabel<f64>>,
    /// Distance between the prediction and the target.
    pub fitness: Option<f64>,
    pub action: Action,
    /// Clamp events, convergence, or the termination reason.
    pub note: Option<String>,
}

/// Mutable loop state: plunger voltages, recalibration budget, the optimizer
/// simplex once seeded, and the append-only step log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TunerState {
    pub v1: f64,
    pub v2: f64,
    /// Recalibrations left.
    pub budget: usize,
    /// Mirror of the environment scale after the latest step.
    pub noise_scale: f64,
    pub log: Vec<StepRecord>,
    pub optimizer: Option<NelderMead>,
    pub converged: bool,
    /// At convergence: did the best vertex's dominant state match the target?
    pub succeeded: bool,
    /// Reason the loop stopped, once a Terminate action fired.
    pub terminated: Option<String>,
}

impl TunerState {
    pub fn new(start: (f64, f64), budget: usize, noise_scale: f64) -> TunerState {
        TunerState {
            v1: start.0,
            v2: start.1,
            budget,
            noise_scale,
            log: Vec::new(),
            optimizer: None,
            converged: false,
            succeeded: false,
            terminated: None,
        }
    }
}

fn clamp_to_bounds(v: (f64, f64), cfg: &TuneConfig) -> (f64, f64) {
    (
        v.0.clamp(cfg.bounds_v1.min, cfg.bounds_v1.max),
        v.1.clamp(cfg.bounds_v2.min, cfg.bounds_v2.max),
    )
}

/// One voltage-optimization act: seed the simplex on the first high-quality
/// step, advance it one Nelder-Mead iteration afterwards. Probe points outside
/// the search bounds are clamped and noted.
fn optimize(
    state: &mut TunerState,
    estimator: &impl StateEstimator,
    env: &mut impl Environment,
    target: &StateLabel<f64>,
    cfg: &TuneConfig,
    estimate: StateLabel<f64>,
    fitness: f64,
    notes: &mut Vec<String>,
) -> Result<()> {
    if state.optimizer.is_none() && fitness < cfg.fitness_threshold {
        state.converged = true;
        state.succeeded = estimate.argmax() == target.argmax();
        notes.push(CONVERGED.to_string());
        return Ok(());
    }
    let start = (state.v1, state.v2);
    {
        let mut probe = |raw: (f64, f64)| -> Result<Vertex> {
            let v = clamp_to_bounds(raw, cfg);
            if v != raw {
                notes.push(format!(
                    "probe ({:.2}, {:.2}) clamped to ({:.2}, {:.2}) mV",
                    raw.0, raw.1, v.0, v.1
                ));
            }
            let window = VoltageWindow::centered(v.0, v.1, cfg.window_span_mv, cfg.window_pixels);
            let sensor = env.measure(&window)?;
            let gradient = gradient_image(&sensor, window.pitch_v1());
            let label = estimator.estimate(&window, &gradient)?;
            Ok(Vertex { v, fitness: label_distance(&label, target), label })
        };
        match &mut state.optimizer {
            None => {
                let origin = Vertex { v: start, fitness, label: estimate };
                let east = probe((start.0 + cfg.initial_step_mv, start.1))?;
                let north = probe((start.0, start.1 + cfg.initial_step_mv))?;
                state.optimizer = Some(NelderMead::from_vertices([origin, east, north])?);
            }
            Some(nm) => nm.step(&mut probe)?,
        }
    }
    let nm = state.optimizer.as_ref().expect("optimizer seeded above");
    let best = *nm.best();
    state.v1 = best.v.0;
    state.v2 = best.v.1;
    if best.fitness < cfg.fitness_threshold || nm.diameter() < cfg.simplex_tolerance_mv {
        state.converged = true;
        state.succeeded = best.label.argmax() == target.argmax();
        notes.push(CONVERGED.to_string());
    }
    Ok(())
}

/// One trip around the gated loop. Measures a window at the current voltages,
/// grades it, routes on the verdict, and appends the step record. Returns the
/// action taken. Calling again after a Terminate action or after convergence
/// is an error; drive the loop through `run_tuning` to stop at the right time.
pub fn tune_step(
    state: &mut TunerState,
    gate: &impl QualityGate,
    estimator: &impl StateEstimator,
    env: &mut impl Environment,
    target: &StateLabel<f64>,
    cfg: &TuneConfig,
) -> Result<Action> {
    cfg.validate()?;
    target.validate()?;
    if state.terminated.is_some() || state.converged {
        return Err(Error::invalid("tuning already finished"));
    }
    let measured_at = (state.v1, state.v2);
    let scale_at = env.noise_scale();
    let window = VoltageWindow::centered(measured_at.0, measured_at.1, cfg.window_span_mv, cfg.window_pixels);
    let sensor = env.measure(&window)?;
    let gradient = gradient_image(&sensor, window.pitch_v1());
    let quality = gate.classify(&window, &gradient)?;

    let mut prediction = None;
    let mut fitness = None;
    let mut notes: Vec<String> = Vec::new();
    let action = match quality {
        QualityClass::High => {
            let estimate = estimator.estimate(&window, &gradient)?;
            let distance = label_distance(&estimate, target);
            prediction = Some(estimate);
            fitness = Some(distance);
            optimize(state, estimator, env, target, cfg, estimate, distance, &mut notes)?;
            Action::ClassifyAndOptimize
        }
        QualityClass::Moderate => {
            if state.budget == 0 {
                state.terminated = Some(BUDGET_EXHAUSTED.to_string());
                notes.push(BUDGET_EXHAUSTED.to_string());
                Action::Terminate
            } else {
                state.budget -= 1;
                env.set_noise_scale(env.noise_scale() * cfg.recalibration_factor);
                Action::Recalibrate
            }
        }
        QualityClass::Low => {
            state.terminated = Some(LOW_QUALITY.to_string());
            notes.push(LOW_QUALITY.to_string());
            Action::Terminate
        }
    };
    state.noise_scale = env.noise_scale();
    state.log.push(StepRecord {
        step: state.log.len(),
        voltages: measured_at,
        noise_scale: scale_at,
        quality,
        prediction,
        fitness,
        action,
        note: if notes.is_empty() { None } else { Some(notes.join("; ")) },
    });
    Ok(action)
}

/// Final report of a tuning run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub converged: bool,
    pub succeeded: bool,
    pub steps: usize,
    /// One of the termination reason strings, or "converged".
    pub termination: String,
    pub state: TunerState,
}

/// Drives `tune_step` until termination, convergence, or the step cap.
pub fn run_tuning(
    gate: &impl QualityGate,
    estimator: &impl StateEstimator,
    env: &mut impl Environment,
    target: &StateLabel<f64>,
    cfg: &TuneConfig,
    start: (f64, f64),
    budget: usize,
) -> Result<TuneOutcome> {
    let mut state = TunerState::new(start, budget, env.noise_scale());
    let termination = loop {
        if state.log.len() >= cfg.max_steps {
            break STEP_LIMIT.to_string();
        }
        let action = tune_step(&mut state, gate, estimator, env, target, cfg)?;
        if action == Action::Terminate {
            break state.terminated.clone().unwrap_or_else(|| "terminated".to_string());
        }
        if state.converged {
            break CONVERGED.to_string();
        }
    };
    Ok(TuneOutcome {
        converged: state.converged,
        succeeded: state.succeeded,
        steps: state.log.len(),
        termination,
        state,
    })
}

/// Sliding-window evaluation of a large scan: per interior pixel, the full
/// state prediction vector and the quality verdict.
#[derive(Clone, Debug)]
pub struct MapEvaluation {
    /// Shape (rows - 2 margin, cols - 2 margin, STATE_COUNT).
    pub predictions: Array3<f64>,
    pub quality: Array2<QualityClass>,
    /// Cropped border width, pixels (half the window).
    pub margin_px: usize,
    pub window_pixels: usize,
}

/// Slides a `window_pixels`-wide window across the scan so that every interior
/// pixel in turn sits at the window anchor (offset `margin_px` on both axes),
/// and runs the estimator and gate on each window's gradient. The output maps
/// drop a `margin_px` border relative to the input scan.
pub fn evaluate_map<E, G>(
    scan: &StabilityScan<f64>,
    estimator: &E,
    gate: &G,
    window_pixels: usize,
) -> Result<MapEvaluation>
where
    E: StateEstimator + Sync,
    G: QualityGate + Sync,
{
    if window_pixels < 2 {
        return Err(Error::invalid("map window needs at least 2 pixels"));
    }
    let (rows, cols) = scan.sensor.dim();
    let margin = window_pixels / 2;
    if rows <= 2 * margin || cols <= 2 * margin {
        return Err(Error::invalid(format!(
            "scan of {rows}x{cols} px is too small: {window_pixels} px windows \
             with a {margin} px margin need more than {} px per axis",
            2 * margin
        )));
    }
    let out_rows = rows - 2 * margin;
    let out_cols = cols - 2 * margin;
    let pitch = scan.window.pitch_v1();
    let positions: Vec<(usize, usize)> =
        (0..out_rows).flat_map(|r| (0..out_cols).map(move |c| (r, c))).collect();
    let results: Vec<(StateLabel<f64>, QualityClass)> = positions
        .par_iter()
        .map(|&(r, c)| {
            let sub = scan
                .sensor
                .slice(s![r..r + window_pixels, c..c + window_pixels])
                .to_owned();
            let window = VoltageWindow {
                v1_start: scan.window.v1_at(c),
                v1_stop: scan.window.v1_at(c + window_pixels - 1),
                v2_start: scan.window.v2_at(r),
                v2_stop: scan.window.v2_at(r + window_pixels - 1),
                pixels_v1: window_pixels,
                pixels_v2: window_pixels,
            };
            let gradient = gradient_image(&sub, pitch);
            let label = estimator.estimate(&window, &gradient)?;
            let quality = gate.classify(&window, &gradient)?;
            Ok((label, quality))
        })
        .collect::<Result<_>>()?;
    let mut predictions = Array3::zeros((out_rows, out_cols, STATE_COUNT));
    let mut quality = Array2::from_elem((out_rows, out_cols), QualityClass::High);
    for (&(r, c), (label, q)) in positions.iter().zip(results) {
        for k in 0..STATE_COUNT {
            predictions[[r, c, k]] = label.p[k];
        }
        quality[[r, c]] = q;
    }
    Ok(MapEvaluation { predictions, quality, margin_px: margin, window_pixels })
}

/// Synthetic large scan whose noise amplitude ramps linearly from zero at the
/// left edge to `max_scale` at the right edge: the clean simulation plus a
/// column-weighted share of the full-scale noise delta.
pub fn noise_gradient_scan(
    device: &DeviceParams<f64>,
    window: &VoltageWindow<f64>,
    base_noise: &NoiseParams<f64>,
    max_scale: f64,
    occupancy_bound: u32,
    seed: u64,
) -> Result<StabilityScan<f64>> {
    if !(max_scale >= 0.0) {
        return Err(Error::invalid("max noise scale must be non-negative"));
    }
    let mut scan = simulate_scan(device, window, occupancy_bound)?;
    let mut params = *base_noise;
    params.noise_scale = max_scale;
    let noisy = apply_noise(device, &scan, &params, seed, occupancy_bound)?;
    let (rows, cols) = scan.sensor.dim();
    let denom = (cols - 1).max(1) as f64;
    for i in 0..rows {
        for j in 0..cols {
            let clean = scan.sensor[[i, j]];
            scan.sensor[[i, j]] = clean + (noisy[[i, j]] - clean) * (j as f64 / denom);
        }
    }
    Ok(scan)
}

/// Per-pixel dominant state of a prediction map.
pub fn dominant_state_map(predictions: &Array3<f64>) -> Array2<StateCode> {
    let (rows, cols, depth) = predictions.dim();
    assert_eq!(depth, STATE_COUNT, "prediction map depth");
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let row: Vec<f64> = (0..depth).map(|k| predictions[[i, j, k]]).collect();
        StateCode::from_index(stats::argmax(&row)).unwrap()
    })
}

/// Pixels where no state reaches `dominance`: the model hedges between states.
pub fn mixed_label_mask(predictions: &Array3<f64>, dominance: f64) -> Array2<bool> {
    let (rows, cols, depth) = predictions.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let mut top = f64::NEG_INFINITY;
        for k in 0..depth {
            top = top.max(predictions[[i, j, k]]);
        }
        top < dominance
    })
}

/// Pixels graded as `class`.
pub fn class_mask(quality: &Array2<QualityClass>, class: QualityClass) -> Array2<bool> {
    quality.mapv(|q| q == class)
}

/// Intersection over union of two boolean masks. Two empty masks agree
/// perfectly, so an empty union scores 1.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mask shapes differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

//! Physics-based synthetic noise for simulated charge-stability scans.
//!
//! Five channels are modeled, applied in a fixed order that mirrors where each
//! disturbance enters a real measurement chain:
//!
//! 1. **Dot jumps**: rare telegraph-like shifts of both dot chemical
//!    potentials (common mode, integer meV magnitudes), which displace the
//!    charge transitions themselves. Occupancies are recomputed per pixel.
//! 2. **Coulomb peak**: the sensor is re-read through a `sech^2` conductance
//!    peak, replacing the raw signal with the peak response. The peak center
//!    may drift linearly over the raster.
//! 3. **Pink (1/f) noise**: built in Fourier space with amplitude
//!    `magnitude / sqrt(fx^2 + fy^2)`, uniform random phases, zero DC, and
//!    Hermitian symmetry, then inverse-transformed with `1/(N*M)`
//!    normalization. The amplitude spectrum is deterministic; only phases are
//!    random, so the radial power spectrum falls off exactly as `1/f^2`.
//! 4. **White noise**: i.i.d. Gaussian per pixel.
//! 5. **Sensor jumps**: a random walk of sensor offsets. Jump locations are
//!    Bernoulli trials per pixel in raster order, so run lengths between
//!    jumps are geometric; each jump adds a fresh `N(0, sigma)` increment to a
//!    cumulative offset.
//!
//! The overall `noise_scale` multiplies the white sigma, the pink magnitude,
//! and the sensor-jump sigma only. Dot jumps and the Coulomb peak have their
//! own parameters and do not scale, matching how the sweep experiments hold
//! the structural channels fixed while ramping the additive ones. The ground
//! truth of the underlying scan is never touched.
//!
//! All randomness is drawn in `f64` from per-channel `ChaCha8` streams derived
//! from one seed, so a given `(seed, params)` pair reproduces the same noise
//! in both `f32` and `f64` pipelines.

use crate::error::{Error, Result};
use crate::float::{fl, Float};
use crate::seed;
use crate::sim::{charge_config_shifted, DeviceParams, StabilityScan};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// The five noise channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    DotJumps,
    CoulombPeak,
    Pink,
    White,
    SensorJumps,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::DotJumps,
        NoiseKind::CoulombPeak,
        NoiseKind::Pink,
        NoiseKind::White,
        NoiseKind::SensorJumps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::DotJumps => "dot-jumps",
            NoiseKind::CoulombPeak => "coulomb-peak",
            NoiseKind::Pink => "pink",
            NoiseKind::White => "white",
            NoiseKind::SensorJumps => "sensor-jumps",
        }
    }
}

/// Which channels are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseMask {
    pub dot_jumps: bool,
    pub coulomb_peak: bool,
    pub pink: bool,
    pub white: bool,
    pub sensor_jumps: bool,
}

impl NoiseMask {
    pub fn none() -> NoiseMask {
        NoiseMask {
            dot_jumps: false,
            coulomb_peak: false,
            pink: false,
            white: false,
            sensor_jumps: false,
        }
    }

    /// The combination used for robust training data: every channel except
    /// the Coulomb-peak readout distortion.
    pub fn standard() -> NoiseMask {
        NoiseMask {
            dot_jumps: true,
            coulomb_peak: false,
            pink: true,
            white: true,
            sensor_jumps: true,
        }
    }

    pub fn all() -> NoiseMask {
        NoiseMask {
            dot_jumps: true,
            coulomb_peak: true,
            pink: true,
            white: true,
            sensor_jumps: true,
        }
    }

    pub fn only(kind: NoiseKind) -> NoiseMask {
        let mut m = NoiseMask::none();
        match kind {
            NoiseKind::DotJumps => m.dot_jumps = true,
            NoiseKind::CoulombPeak => m.coulomb_peak = true,
            NoiseKind::Pink => m.pink = true,
            NoiseKind::White => m.white = true,
            NoiseKind::SensorJumps => m.sensor_jumps = true,
        }
        m
    }

    pub fn enabled(&self, kind: NoiseKind) -> bool {
        match kind {
            NoiseKind::DotJumps => self.dot_jumps,
            NoiseKind::CoulombPeak => self.coulomb_peak,
            NoiseKind::Pink => self.pink,
            NoiseKind::White => self.white,
            NoiseKind::SensorJumps => self.sensor_jumps,
        }
    }
}

/// Full parameterization of the noise pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams<F> {
    /// White-noise standard deviation, signal units.
    pub white_sigma: F,
    /// Pink-noise amplitude coefficient, signal units.
    pub pink_magnitude: F,
    /// Coulomb-peak sharpness, 1/signal units.
    pub coulomb_a: F,
    /// Coulomb-peak height.
    pub coulomb_gmax: F,
    /// Coulomb-peak center, signal units.
    pub coulomb_vmin: F,
    /// Linear drift of the peak center over one full raster, signal units.
    pub coulomb_vmin_drift: F,
    /// Per-pixel probability of a sensor jump.
    pub sensor_jump_prob: F,
    /// Standard deviation of each sensor-jump increment, signal units.
    pub sensor_jump_sigma: F,
    /// Per-pixel probability that a new dot-jump segment starts.
    pub dot_jump_prob: F,
    /// Poisson rate of the integer jump magnitude, meV.
    pub dot_jump_rate: F,
    /// Channels to apply.
    pub mask: NoiseMask,
    /// Global scale applied to the white sigma, pink magnitude, and
    /// sensor-jump sigma.
    pub noise_scale: F,
}

impl<F: Float> NoiseParams<F> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("noise: {msg}")));
        let nonneg = [
            self.white_sigma,
            self.pink_magnitude,
            self.coulomb_a,
            self.coulomb_gmax,
            self.sensor_jump_sigma,
            self.dot_jump_rate,
            self.noise_scale,
        ];
        if nonneg.iter().any(|x| !(*x >= F::zero())) {
            return bad("magnitudes, rates, and noise_scale must be non-negative");
        }
        for p in [self.sensor_jump_prob, self.dot_jump_prob] {
            if !(p >= F::zero() && p <= F::one()) {
                return bad("jump probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn effective_white_sigma(&self) -> F {
        self.white_sigma * self.noise_scale
    }

    pub fn effective_pink_magnitude(&self) -> F {
        self.pink_magnitude * self.noise_scale
    }

    pub fn effective_sensor_jump_sigma(&self) -> F {
        self.sensor_jump_sigma * self.noise_scale
    }

    /// Restricts the parameters to a single channel: the mask keeps only
    /// `kind` and the magnitudes of every other channel are zeroed so the
    /// recorded parameters say exactly what was applied.
    pub fn isolated(&self, kind: NoiseKind) -> NoiseParams<F> {
        let mut p = *self;
        p.mask = NoiseMask::only(kind);
        if kind != NoiseKind::White {
            p.white_sigma = F::zero();
        }
        if kind != NoiseKind::Pink {
            p.pink_magnitude = F::zero();
        }
        if kind != NoiseKind::CoulombPeak {
            p.coulomb_a = F::zero();
            p.coulomb_gmax = F::zero();
            p.coulomb_vmin = F::zero();
            p.coulomb_vmin_drift = F::zero();
        }
        if kind != NoiseKind::SensorJumps {
            p.sensor_jump_prob = F::zero();
            p.sensor_jump_sigma = F::zero();
        }
        if kind != NoiseKind::DotJumps {
            p.dot_jump_prob = F::zero();
            p.dot_jump_rate = F::zero();
        }
        p
    }

    pub fn to_f64(&self) -> NoiseParams<f64> {
        NoiseParams {
            white_sigma: self.white_sigma.to_f64_lossy(),
            pink_magnitude: self.pink_magnitude.to_f64_lossy(),
            coulomb_a: self.coulomb_a.to_f64_lossy(),
            coulomb_gmax: self.coulomb_gmax.to_f64_lossy(),
            coulomb_vmin: self.coulomb_vmin.to_f64_lossy(),
            coulomb_vmin_drift: self.coulomb_vmin_drift.to_f64_lossy(),
            sensor_jump_prob: self.sensor_jump_prob.to_f64_lossy(),
            sensor_jump_sigma: self.sensor_jump_sigma.to_f64_lossy(),
            dot_jump_prob: self.dot_jump_prob.to_f64_lossy(),
            dot_jump_rate: self.dot_jump_rate.to_f64_lossy(),
            mask: self.mask,
            noise_scale: self.noise_scale.to_f64_lossy(),
        }
    }
}

/// How per-sample noise parameters are drawn around a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseSampleMode {
    /// Every channel magnitude jittered by 1% relative Gaussian noise.
    PerNoiseOnePercent,
    /// `noise_scale` drawn from `max(0, N(1, 1/3^2))` times the base scale;
    /// dot-jump parameters get the 1% jitter; everything else stays fixed.
    JointThird,
    /// `noise_scale` drawn uniformly from `[min, max)`; dot-jump parameters
    /// get the 1% jitter.
    ThresholdSweep { min: f64, max: f64 },
}

fn jitter_1pct<F: Float>(x: F, rng: &mut impl Rng) -> F {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    fl(x.to_f64_lossy() * (1.0 + 0.01 * z))
}

fn clamp_prob<F: Float>(x: F) -> F {
    x.max(F::zero()).min(F::one())
}

/// Draws one per-sample noise parameterization. The draw order is fixed so a
/// seed reproduces the same parameters.
pub fn sample_noise_params<F: Float>(
    base: &NoiseParams<F>,
    mode: NoiseSampleMode,
    seed: u64,
) -> NoiseParams<F> {
    let mut rng = seed::rng(seed);
    let mut out = *base;
    match mode {
        NoiseSampleMode::PerNoiseOnePercent => {
            out.white_sigma = jitter_1pct(base.white_sigma, &mut rng).max(F::zero());
            out.pink_magnitude = jitter_1pct(base.pink_magnitude, &mut rng).max(F::zero());
            out.coulomb_a = jitter_1pct(base.coulomb_a, &mut rng).max(F::zero());
            out.coulomb_gmax = jitter_1pct(base.coulomb_gmax, &mut rng).max(F::zero());
            out.coulomb_vmin = jitter_1pct(base.coulomb_vmin, &mut rng);
            out.sensor_jump_prob = clamp_prob(jitter_1pct(base.sensor_jump_prob, &mut rng));
            out.sensor_jump_sigma = jitter_1pct(base.sensor_jump_sigma, &mut rng).max(F::zero());
            out.dot_jump_prob = clamp_prob(jitter_1pct(base.dot_jump_prob, &mut rng));
            out.dot_jump_rate = jitter_1pct(base.dot_jump_rate, &mut rng).max(F::zero());
        }
        NoiseSampleMode::JointThird => {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let factor = (1.0 + z / 3.0).max(0.0);
            out.noise_scale = fl(base.noise_scale.to_f64_lossy() * factor);
            out.dot_jump_prob = clamp_prob(jitter_1pct(base.dot_jump_prob, &mut rng));
            out.dot_jump_rate = jitter_1pct(base.dot_jump_rate, &mut rng).max(F::zero());
        }
        NoiseSampleMode::ThresholdSweep { min, max } => {
            assert!(max > min && min >= 0.0, "bad sweep range");
            out.noise_scale = fl(rng.random_range(min..max));
            out.dot_jump_prob = clamp_prob(jitter_1pct(base.dot_jump_prob, &mut rng));
            out.dot_jump_rate = jitter_1pct(base.dot_jump_rate, &mut rng).max(F::zero());
        }
    }
    out
}

/// I.i.d. Gaussian noise map.
pub fn white_noise<F: Float>(shape: (usize, usize), sigma: F, seed: u64) -> Array2<F> {
    let mut out = Array2::zeros(shape);
    let s = sigma.to_f64_lossy();
    if s == 0.0 {
        return out;
    }
    let mut rng = seed::rng(seed);
    let dist = Normal::new(0.0, s).expect("white noise sigma must be finite and non-negative");
    for x in out.iter_mut() {
        *x = fl(dist.sample(&mut rng));
    }
    out
}

/// Inverse 2D FFT (rows then columns) with `1/(rows*cols)` normalization.
fn ifft2(mut data: Vec<Complex<f64>>, rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_inverse(cols);
    let col_fft = planner.plan_fft_inverse(rows);
    for r in 0..rows {
        row_fft.process(&mut data[r * cols..(r + 1) * cols]);
    }
    let mut col = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = data[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            data[r * cols + c] = col[r];
        }
    }
    let norm = 1.0 / (rows * cols) as f64;
    for x in data.iter_mut() {
        *x *= norm;
    }
    data
}

/// 2D pink noise: `1/f` amplitude spectrum, random phases, zero mean.
///
/// The spectrum is filled bin by bin in row-major order. Each conjugate pair
/// gets one uniform phase; self-conjugate bins get a random sign; the DC bin
/// stays zero. The result is exactly real up to rounding.
pub fn pink_noise<F: Float>(shape: (usize, usize), magnitude: F, seed: u64) -> Array2<F> {
    let (rows, cols) = shape;
    let m = magnitude.to_f64_lossy();
    if m == 0.0 {
        return Array2::zeros(shape);
    }
    let mut rng = seed::rng(seed);
    let mut spec = vec![Complex::new(0.0, 0.0); rows * cols];
    for ky in 0..rows {
        for kx in 0..cols {
            let mky = (rows - ky) % rows;
            let mkx = (cols - kx) % cols;
            if (ky, kx) == (0, 0) {
                continue;
            }
            let fy = if ky <= rows / 2 {
                ky as f64 / rows as f64
            } else {
                (ky as f64 - rows as f64) / rows as f64
            };
            let fx = if kx <= cols / 2 {
                kx as f64 / cols as f64
            } else {
                (kx as f64 - cols as f64) / cols as f64
            };
            let amp = m / (fx * fx + fy * fy).sqrt();
            if (ky, kx) == (mky, mkx) {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                spec[ky * cols + kx] = Complex::new(sign * amp, 0.0);
            } else if (ky, kx) < (mky, mkx) {
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let val = Complex::from_polar(amp, phase);
                spec[ky * cols + kx] = val;
                spec[mky * cols + mkx] = val.conj();
            }
        }
    }
    let field = ifft2(spec, rows, cols);
    let mut out = Array2::zeros(shape);
    for (i, x) in out.iter_mut().enumerate() {
        *x = fl(field[i].re);
    }
    out
}

/// Reads the map through a Coulomb-blockade conductance peak:
/// `g(v) = gmax * sech^2(a * (v - vmin))`. The peak center moves linearly by
/// `vmin_drift` over the raster, modeling a slow drift during acquisition.
pub fn coulomb_peak<F: Float>(
    map: &Array2<F>,
    a: F,
    gmax: F,
    vmin: F,
    vmin_drift: F,
) -> Array2<F> {
    let n = map.len().max(2);
    let mut out = map.clone();
    for (idx, x) in out.iter_mut().enumerate() {
        let frac = idx as f64 / (n - 1) as f64;
        let center = vmin + vmin_drift * fl(frac);
        let arg = (a * (*x - center)).to_f64_lossy();
        *x = gmax * fl(arg.cosh().powi(-2));
    }
    out
}

/// Cumulative sensor-offset walk: Bernoulli jump locations, Gaussian
/// increments. Returns the noisy map.
pub fn sensor_jumps<F: Float>(map: &Array2<F>, prob: F, sigma: F, seed: u64) -> Array2<F> {
    let p = prob.to_f64_lossy();
    let s = sigma.to_f64_lossy();
    let mut out = map.clone();
    if p == 0.0 {
        return out;
    }
    let mut rng = seed::rng(seed);
    let inc = Normal::new(0.0, s).expect("sensor jump sigma must be finite and non-negative");
    let mut offset = 0.0f64;
    for x in out.iter_mut() {
        if rng.random_range(0.0..1.0) < p {
            offset += inc.sample(&mut rng);
        }
        *x += fl(offset);
    }
    out
}

/// Per-pixel chemical-potential shifts from dot jumps, in meV.
///
/// Raster-order Bernoulli trials split the scan into segments; each segment
/// carries an independent shift `sign * k` with `k ~ Poisson(rate)`. The
/// segment before the first jump is unperturbed.
pub fn dot_jump_shifts<F: Float>(
    shape: (usize, usize),
    prob: F,
    rate: F,
    seed: u64,
) -> Array2<F> {
    let p = prob.to_f64_lossy();
    let r = rate.to_f64_lossy();
    let mut out = Array2::zeros(shape);
    if p == 0.0 || r == 0.0 {
        return out;
    }
    let mut rng = seed::rng(seed);
    let pois = Poisson::new(r).expect("dot jump rate must be positive");
    let mut shift = 0.0f64;
    for x in out.iter_mut() {
        if rng.random_range(0.0..1.0) < p {
            let k: f64 = pois.sample(&mut rng);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            shift = sign * k.round();
        }
        *x = fl(shift);
    }
    out
}

/// Re-rasters the scan with per-pixel common-mode potential shifts and
/// returns the resulting sensor map. Ground truth is not touched.
pub fn apply_dot_jumps<F: Float>(
    device: &DeviceParams<F>,
    scan: &StabilityScan<F>,
    shifts: &Array2<F>,
    bound: u32,
) -> Result<Array2<F>> {
    if shifts.dim() != scan.sensor.dim() {
        return Err(Error::ShapeMismatch(format!(
            "dot jump shifts {:?} vs scan {:?}",
            shifts.dim(),
            scan.sensor.dim()
        )));
    }
    let mut out = scan.sensor.clone();
    let (rows, cols) = out.dim();
    for i in 0..rows {
        let v2 = scan.window.v2_at(i);
        for j in 0..cols {
            let shift = shifts[[i, j]];
            if shift == F::zero() {
                continue;
            }
            let v1 = scan.window.v1_at(j);
            let occ = charge_config_shifted(device, v1, v2, shift, bound)?;
            out[[i, j]] = device.sensor_value(occ, v1, v2);
        }
    }
    Ok(out)
}

/// Applies the enabled noise channels to a clean scan in pipeline order and
/// returns the noisy sensor map.
///
/// Seed usage: stream 0 drives dot jumps, 1 pink noise, 2 white noise, and
/// 3 sensor jumps, so disabling one channel never changes the draws of the
/// others.
pub fn apply_noise<F: Float>(
    device: &DeviceParams<F>,
    scan: &StabilityScan<F>,
    params: &NoiseParams<F>,
    seed: u64,
    bound: u32,
) -> Result<Array2<F>> {
    params.validate()?;
    let shape = scan.sensor.dim();
    let mut map = if params.mask.dot_jumps && params.dot_jump_prob > F::zero() {
        let shifts = dot_jump_shifts(shape, params.dot_jump_prob, params.dot_jump_rate, seed::derive(seed, 0));
        apply_dot_jumps(device, scan, &shifts, bound)?
    } else {
        scan.sensor.clone()
    };
    if params.mask.coulomb_peak {
        map = coulomb_peak(
            &map,
            params.coulomb_a,
            params.coulomb_gmax,
            params.coulomb_vmin,
            params.coulomb_vmin_drift,
        );
    }
    if params.mask.pink {
        let pink = pink_noise(shape, params.effective_pink_magnitude(), seed::derive(seed, 1));
        map += &pink;
    }
    if params.mask.white {
        let white = white_noise(shape, params.effective_white_sigma(), seed::derive(seed, 2));
        map += &white;
    }
    if params.mask.sensor_jumps {
        map = sensor_jumps(
            &map,
            params.sensor_jump_prob,
            params.effective_sensor_jump_sigma(),
            seed::derive(seed, 3),
        );
    }
    Ok(map)
}

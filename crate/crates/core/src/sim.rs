//! Constant-interaction simulator for a two-gate double quantum dot with a
//! proximal charge sensor.
//!
//! The electrostatic energy of a charge configuration `(n1, n2)` at gate
//! voltages `(v1, v2)` is
//!
//! ```text
//! U(n1, n2) = ec1/2 * n1*(n1-1) + ec2/2 * n2*(n2-1) + em * n1*n2
//!             - n1 * mu1(v1, v2) - n2 * mu2(v1, v2)
//! ```
//!
//! where the chemical potentials are affine in the gate voltages through the
//! lever-arm matrix. The ground state is found by exhaustive search over
//! `[0, bound]^2`; energies are compared exactly, and degenerate minima are
//! resolved in favor of the smallest total electron number, then the smallest
//! left occupancy, so scans are reproducible bit for bit.
//!
//! Units: energies in meV, voltages in mV, lever arms in meV/mV.

use crate::error::{Error, Result};
use crate::float::{fl, Float};
use crate::seed;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of device states in the taxonomy.
pub const STATE_COUNT: usize = 5;

/// Default upper bound for the per-dot occupancy search.
pub const DEFAULT_OCCUPANCY_BOUND: u32 = 10;

/// Device-state taxonomy. The discriminants fix the label vector layout.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum StateCode {
    /// No dot: zero electrons everywhere in the pixel.
    NoDot = 0,
    /// Only the left dot is occupied.
    LeftDot = 1,
    /// Merged-dot regime: interdot coupling dominates charging.
    CentralDot = 2,
    /// Only the right dot is occupied.
    RightDot = 3,
    /// Both dots are occupied and distinct.
    DoubleDot = 4,
}

impl StateCode {
    pub const ALL: [StateCode; STATE_COUNT] = [
        StateCode::NoDot,
        StateCode::LeftDot,
        StateCode::CentralDot,
        StateCode::RightDot,
        StateCode::DoubleDot,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<StateCode> {
        StateCode::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StateCode::NoDot => "ND",
            StateCode::LeftDot => "LD",
            StateCode::CentralDot => "CD",
            StateCode::RightDot => "RD",
            StateCode::DoubleDot => "DD",
        }
    }
}

/// Electrostatic parameters of one simulated device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams<F> {
    /// Charging energy of the left dot, meV.
    pub charging_energy_left: F,
    /// Charging energy of the right dot, meV.
    pub charging_energy_right: F,
    /// Mutual charging energy between the dots, meV.
    pub mutual_charging_energy: F,
    /// Row i maps the gate-voltage vector to the chemical potential of dot i,
    /// meV/mV. Diagonal entries dominate their row.
    pub lever_arm: [[F; 2]; 2],
    /// Cross-talk ratios used to build the off-diagonal lever-arm entries:
    /// `lever_arm[0][1] = cross_talk[0] * lever_arm[0][0]` and likewise for
    /// the second row.
    pub cross_talk: [F; 2],
    /// Sensor response per electron on each dot, signal units.
    pub sensor_coupling: [F; 2],
    /// Direct sensor response per mV on each plunger gate.
    pub sensor_gate_coupling: [F; 2],
    /// Chemical-potential offsets at zero gate voltage, meV.
    pub offset_left: F,
    pub offset_right: F,
    /// Merged-dot threshold on `mutual / mean(charging)`.
    pub merge_ratio_threshold: F,
}

impl<F: Float> DeviceParams<F> {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("device: {msg}")));
        if !(self.charging_energy_left > F::zero()) || !(self.charging_energy_right > F::zero()) {
            return bad("charging energies must be positive");
        }
        let min_ec = self.charging_energy_left.min(self.charging_energy_right);
        if !(self.mutual_charging_energy >= F::zero()) || self.mutual_charging_energy > min_ec {
            return bad("mutual charging energy must lie in [0, min(charging energies)]");
        }
        for r in 0..2 {
            for c in 0..2 {
                if !(self.lever_arm[r][c] >= F::zero()) {
                    return bad("lever-arm entries must be non-negative");
                }
            }
            if !(self.lever_arm[r][r] > self.lever_arm[r][1 - r]) {
                return bad("lever-arm diagonal must dominate its row");
            }
        }
        for i in 0..2 {
            if !(self.sensor_coupling[i] >= F::zero()) || !(self.sensor_gate_coupling[i] >= F::zero())
            {
                return bad("sensor couplings must be non-negative");
            }
            if !(self.cross_talk[i] >= F::zero()) {
                return bad("cross-talk ratios must be non-negative");
            }
        }
        if !(self.merge_ratio_threshold > F::zero()) {
            return bad("merge ratio threshold must be positive");
        }
        Ok(())
    }

    /// Chemical potentials of the two dots at the given gate voltages.
    pub fn chemical_potentials(&self, v1: F, v2: F) -> (F, F) {
        let mu1 = self.lever_arm[0][0] * v1 + self.lever_arm[0][1] * v2 + self.offset_left;
        let mu2 = self.lever_arm[1][0] * v1 + self.lever_arm[1][1] * v2 + self.offset_right;
        (mu1, mu2)
    }

    /// Ratio of mutual charging energy to the mean single-dot charging energy.
    pub fn merge_ratio(&self) -> F {
        let mean_ec = (self.charging_energy_left + self.charging_energy_right) / fl(2.0);
        self.mutual_charging_energy / mean_ec
    }

    /// Whether the device sits in the merged (central dot) regime.
    pub fn is_merged(&self) -> bool {
        self.merge_ratio() > self.merge_ratio_threshold
    }

    /// Sensor signal for a given occupancy at the given gate voltages.
    pub fn sensor_value(&self, occ: (u32, u32), v1: F, v2: F) -> F {
        self.sensor_coupling[0] * F::from_u32(occ.0).unwrap()
            + self.sensor_coupling[1] * F::from_u32(occ.1).unwrap()
            + self.sensor_gate_coupling[0] * v1
            + self.sensor_gate_coupling[1] * v2
    }
}

/// Electrostatic energy of configuration `(n1, n2)` given chemical potentials.
fn config_energy<F: Float>(device: &DeviceParams<F>, n1: u32, n2: u32, mu1: F, mu2: F) -> F {
    let f1 = F::from_u32(n1).unwrap();
    let f2 = F::from_u32(n2).unwrap();
    let half = fl::<F>(0.5);
    device.charging_energy_left * half * f1 * (f1 - F::one())
        + device.charging_energy_right * half * f2 * (f2 - F::one())
        + device.mutual_charging_energy * f1 * f2
        - f1 * mu1
        - f2 * mu2
}

/// Ground-state occupancy at `(v1, v2)` with both dot potentials shifted by
/// `shift` (used by the dot-jump noise channel; pass zero otherwise).
pub fn charge_config_shifted<F: Float>(
    device: &DeviceParams<F>,
    v1: F,
    v2: F,
    shift: F,
    bound: u32,
) -> Result<(u32, u32)> {
    if bound == 0 {
        return Err(Error::invalid("occupancy bound must be at least 1"));
    }
    let (mu1, mu2) = device.chemical_potentials(v1, v2);
    let (mu1, mu2) = (mu1 + shift, mu2 + shift);
    let mut best = (0u32, 0u32);
    let mut best_energy = config_energy(device, 0, 0, mu1, mu2);
    for n1 in 0..=bound {
        for n2 in 0..=bound {
            if n1 == 0 && n2 == 0 {
                continue;
            }
            let e = config_energy(device, n1, n2, mu1, mu2);
            let better = e < best_energy
                || (e == best_energy && (n1 + n2, n1) < (best.0 + best.1, best.0));
            if better {
                best = (n1, n2);
                best_energy = e;
            }
        }
    }
    if best.0 == bound || best.1 == bound {
        return Err(Error::OccupancyBound { bound });
    }
    Ok(best)
}

/// Ground-state occupancy at `(v1, v2)` searched over `[0, bound]^2`.
pub fn compute_charge_config<F: Float>(
    device: &DeviceParams<F>,
    v1: F,
    v2: F,
    bound: u32,
) -> Result<(u32, u32)> {
    charge_config_shifted(device, v1, v2, F::zero(), bound)
}

/// Classifies one pixel from its ground-state occupancy.
///
/// The merged-dot label overrides the occupied labels: any occupied pixel of a
/// merged device reads as a central dot.
pub fn classify_occupancy<F: Float>(device: &DeviceParams<F>, occ: (u32, u32)) -> StateCode {
    match occ {
        (0, 0) => StateCode::NoDot,
        _ if device.is_merged() => StateCode::CentralDot,
        (_, 0) => StateCode::LeftDot,
        (0, _) => StateCode::RightDot,
        _ => StateCode::DoubleDot,
    }
}

/// Rectangular raster window in gate-voltage space. Rows sweep `v2`, columns
/// sweep `v1`; both endpoints are included, so the pitch between neighboring
/// pixels is `span / (pixels - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageWindow<F> {
    pub v1_start: F,
    pub v1_stop: F,
    pub v2_start: F,
    pub v2_stop: F,
    /// Pixel count along v1 (columns).
    pub pixels_v1: usize,
    /// Pixel count along v2 (rows).
    pub pixels_v2: usize,
}

impl<F: Float> VoltageWindow<F> {
    /// Square window centered at `(c1, c2)` spanning `span` mV on both axes.
    pub fn centered(c1: F, c2: F, span: F, pixels: usize) -> VoltageWindow<F> {
        let half = span / fl(2.0);
        VoltageWindow {
            v1_start: c1 - half,
            v1_stop: c1 + half,
            v2_start: c2 - half,
            v2_stop: c2 + half,
            pixels_v1: pixels,
            pixels_v2: pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels_v1 < 2 || self.pixels_v2 < 2 {
            return Err(Error::invalid("window needs at least 2 pixels per axis"));
        }
        if !(self.v1_stop > self.v1_start) || !(self.v2_stop > self.v2_start) {
            return Err(Error::invalid("window stop voltages must exceed starts"));
        }
        Ok(())
    }

    pub fn pitch_v1(&self) -> F {
        (self.v1_stop - self.v1_start) / F::from_usize(self.pixels_v1 - 1).unwrap()
    }

    pub fn pitch_v2(&self) -> F {
        (self.v2_stop - self.v2_start) / F::from_usize(self.pixels_v2 - 1).unwrap()
    }

    pub fn v1_at(&self, col: usize) -> F {
        self.v1_start + self.pitch_v1() * F::from_usize(col).unwrap()
    }

    pub fn v2_at(&self, row: usize) -> F {
        self.v2_start + self.pitch_v2() * F::from_usize(row).unwrap()
    }

    /// Shape of the raster as `(rows, cols)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.pixels_v2, self.pixels_v1)
    }
}

/// Result of rastering one window: noiseless sensor map plus per-pixel ground
/// truth.
#[derive(Clone, Debug)]
pub struct StabilityScan<F> {
    pub window: VoltageWindow<F>,
    /// Noiseless sensor signal, shape `(pixels_v2, pixels_v1)`.
    pub sensor: Array2<F>,
    /// Ground-state occupancy per pixel.
    pub occupancy: Array2<(u32, u32)>,
    /// State code per pixel.
    pub states: Array2<StateCode>,
}

/// Rasters the window and classifies every pixel.
pub fn simulate_scan<F: Float>(
    device: &DeviceParams<F>,
    window: &VoltageWindow<F>,
    bound: u32,
) -> Result<StabilityScan<F>> {
    device.validate()?;
    window.validate()?;
    let (rows, cols) = window.shape();
    let mut sensor = Array2::zeros((rows, cols));
    let mut occupancy = Array2::from_elem((rows, cols), (0u32, 0u32));
    let mut states = Array2::from_elem((rows, cols), StateCode::NoDot);
    for i in 0..rows {
        let v2 = window.v2_at(i);
        for j in 0..cols {
            let v1 = window.v1_at(j);
            let occ = compute_charge_config(device, v1, v2, bound)?;
            sensor[[i, j]] = device.sensor_value(occ, v1, v2);
            occupancy[[i, j]] = occ;
            states[[i, j]] = classify_occupancy(device, occ);
        }
    }
    Ok(StabilityScan {
        window: *window,
        sensor,
        occupancy,
        states,
    })
}

/// Per-window state histogram: the fraction of pixels carrying each state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateLabel<F> {
    pub p: [F; STATE_COUNT],
}

impl<F: Float> StateLabel<F> {
    pub fn from_counts(counts: [usize; STATE_COUNT]) -> StateLabel<F> {
        let total: usize = counts.iter().sum();
        assert!(total > 0, "state label from empty counts");
        let mut p = [F::zero(); STATE_COUNT];
        for (out, &c) in p.iter_mut().zip(counts.iter()) {
            *out = F::from_usize(c).unwrap() / F::from_usize(total).unwrap();
        }
        StateLabel { p }
    }

    pub fn one_hot(state: StateCode) -> StateLabel<F> {
        let mut p = [F::zero(); STATE_COUNT];
        p[state.index()] = F::one();
        StateLabel { p }
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0f64;
        for &x in &self.p {
            let x = x.to_f64_lossy();
            if !(0.0..=1.0 + 1e-9).contains(&x) {
                return Err(Error::invalid("state label component outside [0, 1]"));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "state label components sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Dominant state (first index wins exact ties).
    pub fn argmax(&self) -> StateCode {
        StateCode::from_index(crate::stats::argmax(&self.p)).unwrap()
    }

    /// Mean absolute error against another label vector.
    pub fn mae(&self, other: &StateLabel<F>) -> F {
        let mut acc = F::zero();
        for i in 0..STATE_COUNT {
            acc += (self.p[i] - other.p[i]).abs();
        }
        acc / fl(STATE_COUNT as f64)
    }

    pub fn to_f64(&self) -> StateLabel<f64> {
        let mut p = [0.0f64; STATE_COUNT];
        for i in 0..STATE_COUNT {
            p[i] = self.p[i].to_f64_lossy();
        }
        StateLabel { p }
    }
}

/// Histogram of the per-pixel states of a scan.
pub fn label_scan<F: Float>(scan: &StabilityScan<F>) -> StateLabel<F> {
    let mut counts = [0usize; STATE_COUNT];
    for &s in scan.states.iter() {
        counts[s.index()] += 1;
    }
    StateLabel::from_counts(counts)
}

/// Inclusive sampling range for one device parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range<F> {
    pub min: F,
    pub max: F,
}

impl<F: Float> Range<F> {
    pub fn new(min: F, max: F) -> Range<F> {
        Range { min, max }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max >= self.min) {
            return Err(Error::invalid("range max must be >= min"));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> F {
        let lo = self.min.to_f64_lossy();
        let hi = self.max.to_f64_lossy();
        if lo == hi {
            return self.min;
        }
        fl(rng.random_range(lo..hi))
    }
}

/// Sampling ranges for random device generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRanges<F> {
    pub charging_energy: Range<F>,
    pub mutual_charging_energy: Range<F>,
    pub lever_arm_diag: Range<F>,
    pub cross_talk: Range<F>,
    pub sensor_coupling_left: Range<F>,
    pub sensor_coupling_right: Range<F>,
    pub sensor_gate_coupling: Range<F>,
    pub offset: Range<F>,
    pub merge_ratio_threshold: F,
}

impl<F: Float> DeviceRanges<F> {
    pub fn validate(&self) -> Result<()> {
        self.charging_energy.validate()?;
        self.mutual_charging_energy.validate()?;
        self.lever_arm_diag.validate()?;
        self.cross_talk.validate()?;
        self.sensor_coupling_left.validate()?;
        self.sensor_coupling_right.validate()?;
        self.sensor_gate_coupling.validate()?;
        self.offset.validate()?;
        if !(self.charging_energy.min > F::zero()) {
            return Err(Error::invalid("charging energy range must be positive"));
        }
        if !(self.cross_talk.max < F::one()) {
            return Err(Error::invalid("cross-talk ratios must stay below 1"));
        }
        if !(self.merge_ratio_threshold > F::zero()) {
            return Err(Error::invalid("merge ratio threshold must be positive"));
        }
        Ok(())
    }
}

/// Draws one device from the given ranges. The draw order is fixed (charging
/// energies, mutual energy, lever-arm diagonal, cross-talk, sensor couplings,
/// gate couplings, offsets) so a seed always reproduces the same device.
pub fn sample_device<F: Float>(seed: u64, ranges: &DeviceRanges<F>) -> Result<DeviceParams<F>> {
    ranges.validate()?;
    const ATTEMPTS: usize = 64;
    for attempt in 0..ATTEMPTS {
        let mut rng = seed::rng(seed::derive(seed, attempt as u64));
        let ec1 = ranges.charging_energy.sample(&mut rng);
        let ec2 = ranges.charging_energy.sample(&mut rng);
        let em = ranges.mutual_charging_energy.sample(&mut rng);
        let a11 = ranges.lever_arm_diag.sample(&mut rng);
        let a22 = ranges.lever_arm_diag.sample(&mut rng);
        let ct1 = ranges.cross_talk.sample(&mut rng);
        let ct2 = ranges.cross_talk.sample(&mut rng);
        let c1 = ranges.sensor_coupling_left.sample(&mut rng);
        let c2 = ranges.sensor_coupling_right.sample(&mut rng);
        let g1 = ranges.sensor_gate_coupling.sample(&mut rng);
        let g2 = ranges.sensor_gate_coupling.sample(&mut rng);
        let o1 = ranges.offset.sample(&mut rng);
        let o2 = ranges.offset.sample(&mut rng);
        let device = DeviceParams {
            charging_energy_left: ec1,
            charging_energy_right: ec2,
            mutual_charging_energy: em.min(ec1.min(ec2)),
            lever_arm: [[a11, ct1 * a11], [ct2 * a22, a22]],
            cross_talk: [ct1, ct2],
            sensor_coupling: [c1, c2],
            sensor_gate_coupling: [g1, g2],
            offset_left: o1,
            offset_right: o2,
            merge_ratio_threshold: ranges.merge_ratio_threshold,
        };
        if device.validate().is_ok() {
            return Ok(device);
        }
    }
    Err(Error::SamplingExhausted {
        what: "device parameters never satisfied the invariants".into(),
        attempts: ATTEMPTS,
    })
}

//! Default parameters embedded from `configs/defaults.toml`, plus the
//! file-backed override mechanism the CLI exposes as `--config`.
//!
//! The file is the single source of truth for magnitudes that several
//! commands must agree on (device sampling box, noise magnitudes at scale 1,
//! window geometry). Command-specific knobs such as seeds, counts, and model
//! tallies stay on the command line and are merged in by the caller.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autotune::TuneConfig;
use crate::dataset::{DatasetKind, GenerateConfig, SplitSpec};
use crate::dqc::QualityThresholds;
use crate::nn::TrainConfig;
use crate::noise::{NoiseMask, NoiseParams};
use crate::sim::{DeviceParams, DeviceRanges, Range};
use crate::{Error, Result};

/// TOML baked into the binary; [`Defaults::builtin`] parses it.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/defaults.toml");

/// Channel magnitudes at `noise_scale = 1`. The mask and scale are run-time
/// choices, so they are not part of the file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    pub white_sigma: f64,
    pub pink_magnitude: f64,
    pub coulomb_a: f64,
    pub coulomb_gmax: f64,
    pub coulomb_vmin: f64,
    pub coulomb_vmin_drift: f64,
    pub sensor_jump_prob: f64,
    pub sensor_jump_sigma: f64,
    pub dot_jump_prob: f64,
    pub dot_jump_rate: f64,
}

impl NoiseSection {
    pub fn params(&self, mask: NoiseMask, noise_scale: f64) -> NoiseParams<f64> {
        NoiseParams {
            white_sigma: self.white_sigma,
            pink_magnitude: self.pink_magnitude,
            coulomb_a: self.coulomb_a,
            coulomb_gmax: self.coulomb_gmax,
            coulomb_vmin: self.coulomb_vmin,
            coulomb_vmin_drift: self.coulomb_vmin_drift,
            sensor_jump_prob: self.sensor_jump_prob,
            sensor_jump_sigma: self.sensor_jump_sigma,
            dot_jump_prob: self.dot_jump_prob,
            dot_jump_rate: self.dot_jump_rate,
            mask,
            noise_scale,
        }
    }
}

/// Window geometry and draw ranges shared by every dataset kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSection {
    pub image_pixels: usize,
    pub window_span_mv: f64,
    pub occupancy_bound: u32,
    pub center_box_v1: Range<f64>,
    pub center_box_v2: Range<f64>,
    pub sweep_min: f64,
    pub sweep_max: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Threshold sweeps split differently: calibration needs bulk, but the
    /// held-out share must populate all three quality classes.
    pub sweep_train_fraction: f64,
    pub sweep_val_fraction: f64,
    pub split_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            patience: self.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub dse: TrainSection,
    pub dqc: TrainSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneSection {
    /// Recalibrations allowed before the loop gives up.
    pub budget: usize,
    #[serde(flatten)]
    pub config: TuneConfig,
}

/// Work sizes for one `reproduce` preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePreset {
    pub train_samples: usize,
    pub test_samples: usize,
    pub sweep_samples: usize,
    pub dqc_samples: usize,
    pub dse_models: usize,
    pub dqc_models: usize,
    pub map_pixels: usize,
    pub map_window_pixels: usize,
}

impl ScalePreset {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.train_samples,
            self.test_samples,
            self.sweep_samples,
            self.dqc_samples,
            self.dse_models,
            self.dqc_models,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("scale preset has a zero count"));
        }
        if self.map_pixels <= 2 * (self.map_window_pixels / 2) {
            return Err(Error::invalid(
                "map_pixels leaves no interior after the window margin",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Defaults {
    pub device: DeviceParams<f64>,
    pub device_ranges: DeviceRanges<f64>,
    pub noise: NoiseSection,
    pub sampling: SamplingSection,
    pub training: TrainingSection,
    pub tune: TuneSection,
    pub scales: BTreeMap<String, ScalePreset>,
}

impl Defaults {
    /// The embedded file. Panics only if the build itself shipped a broken
    /// TOML, which the unit tests rule out.
    pub fn builtin() -> Defaults {
        Defaults::from_toml(DEFAULT_TOML).expect("embedded defaults must parse")
    }

    pub fn from_toml(text: &str) -> Result<Defaults> {
        let d: Defaults = toml::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn from_path(path: &Path) -> Result<Defaults> {
        Defaults::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.device_ranges.validate()?;
        self.noise.params(NoiseMask::standard(), 1.0).validate()?;
        self.tune.config.validate()?;
        if self.tune.budget == 0 {
            return Err(Error::invalid("recalibration budget must be at least 1"));
        }
        let s = &self.sampling;
        if s.image_pixels < 2 || !(s.window_span_mv > 0.0) || s.occupancy_bound == 0 {
            return Err(Error::invalid("sampling section has degenerate geometry"));
        }
        if !(s.sweep_max > s.sweep_min) || s.sweep_min < 0.0 {
            return Err(Error::invalid("sweep range must be non-negative and increasing"));
        }
        self.split().validate()?;
        self.sweep_split().validate()?;
        if self.scales.is_empty() {
            return Err(Error::invalid("at least one scale preset is required"));
        }
        for preset in self.scales.values() {
            preset.validate()?;
        }
        Ok(())
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.sampling.train_fraction,
            val_fraction: self.sampling.val_fraction,
            seed: self.sampling.split_seed,
        }
    }

    pub fn sweep_split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.sampling.sweep_train_fraction,
            val_fraction: self.sampling.sweep_val_fraction,
            seed: self.sampling.split_seed,
        }
    }

    /// Assembles a full generation config; the combined-noise channels and
    /// scale 1 are the baseline, and the sweep kinds override the scale per
    /// sample anyway.
    pub fn generate_config(
        &self,
        kind: DatasetKind,
        count: usize,
        thresholds: Option<QualityThresholds>,
    ) -> GenerateConfig {
        let split = match kind {
            DatasetKind::ThresholdSweep => self.sweep_split(),
            _ => self.split(),
        };
        GenerateConfig {
            kind,
            count,
            image_pixels: self.sampling.image_pixels,
            window_span_mv: self.sampling.window_span_mv,
            occupancy_bound: self.sampling.occupancy_bound,
            device_ranges: self.device_ranges.clone(),
            base_noise: self.noise.params(NoiseMask::standard(), 1.0),
            sweep_min: self.sampling.sweep_min,
            sweep_max: self.sampling.sweep_max,
            center_box_v1: self.sampling.center_box_v1,
            center_box_v2: self.sampling.center_box_v2,
            thresholds,
            split,
        }
    }

    pub fn scale(&self, name: &str) -> Result<ScalePreset> {
        self.scales.get(name).copied().ok_or_else(|| {
            let known: Vec<&str> = self.scales.keys().map(String::as_str).collect();
            Error::invalid(format!(
                "unknown scale '{name}'; available: {}",
                known.join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_defaults_parse_and_validate() {
        let d = Defaults::builtin();
        assert_eq!(d.sampling.image_pixels, 30);
        assert_eq!(d.tune.config.window_pixels, 30);
        assert_eq!(d.tune.budget, 3);
        assert!(d.scales.contains_key("desk"));
        assert!(d.scales.contains_key("smoke"));
        let desk = d.scale("desk").unwrap();
        assert_eq!(desk.dse_models, 5);
        assert!(d.scale("galactic").is_err());
    }

    #[test]
    fn sections_assemble_into_library_configs() {
        let d = Defaults::builtin();
        let gen = d.generate_config(DatasetKind::Noiseless, 10, None);
        gen.validate().unwrap();
        assert_eq!(gen.split.seed, d.sampling.split_seed);

        let tc = d.training.dse.config(99);
        assert_eq!(tc.seed, 99);
        assert_eq!(tc.epochs, d.training.dse.epochs);

        let np = d.noise.params(NoiseMask::standard(), 2.0);
        np.validate().unwrap();
        assert_eq!(np.noise_scale, 2.0);
    }

    #[test]
    fn overrides_must_still_validate() {
        let broken = DEFAULT_TOML.replace("budget = 3", "budget = 0");
        assert!(Defaults::from_toml(&broken).is_err());
        let garbled = DEFAULT_TOML.replace("[sampling]", "[sampling");
        assert!(Defaults::from_toml(&garbled).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = Defaults::builtin();
        let text = toml::to_string(&d).unwrap();
        let back = Defaults::from_toml(&text).unwrap();
        assert_eq!(back.device, d.device);
        assert_eq!(back.tune, d.tune);
        assert_eq!(back.scales, d.scales);
    }
}

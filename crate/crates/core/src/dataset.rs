//! Dataset generation and the on-disk container.
//!
//! A dataset is a directory holding `manifest.json` plus `samples.bin`. Each
//! record is, in order and little-endian: the noisy sensor map (H*W f32,
//! row-major), its gradient along the plunger-1 axis (H*W f32), the 5-way
//! fractional state label (f32), one quality code byte (255 when the dataset
//! carries no quality labels), and the recorded noise scale (f32).
//!
//! Generation is deterministic in (master seed, config): every sample draws
//! its device, window center, noise parameters, and noise realization from
//! seeds derived from the master seed and the sample index, so regeneration
//! is byte-identical and samples can be produced in parallel.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dqc::{assign_quality, QualityClass, QualityThresholds};
use crate::error::{Error, Result};
use crate::float::{fl, Float};
use crate::noise::{apply_noise, sample_noise_params, NoiseKind, NoiseParams, NoiseSampleMode};
use crate::seed;
use crate::sim::{
    classify_occupancy, compute_charge_config, label_scan, sample_device, simulate_scan,
    DeviceRanges, Range, StateCode, StateLabel, VoltageWindow, STATE_COUNT,
};

pub const DATASET_FORMAT: &str = "qdtune-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const DTYPE_TAG: &str = "float32-le";

/// Rejection attempts when steering a sample toward its target state.
const CENTER_ATTEMPTS: u64 = 40;

/// What a dataset is for; decides the noise pipeline and labeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Clean sensor maps, no noise applied.
    Noiseless,
    /// Exactly one noise channel enabled, magnitudes jittered by 1%.
    PerNoise(NoiseKind),
    /// The standard channel combination with jointly scaled magnitudes.
    Combined,
    /// The standard combination with the scale swept uniformly over a range.
    ThresholdSweep,
    /// Threshold sweep plus per-sample quality labels from calibrated
    /// thresholds; the only kind that records quality codes.
    DqcLabeled,
}

impl DatasetKind {
    pub fn name(self) -> String {
        match self {
            DatasetKind::Noiseless => "noiseless".into(),
            DatasetKind::PerNoise(k) => format!("per-noise-{}", k.name()),
            DatasetKind::Combined => "combined".into(),
            DatasetKind::ThresholdSweep => "threshold-sweep".into(),
            DatasetKind::DqcLabeled => "dqc-labeled".into(),
        }
    }
}

/// One loaded record. Arrays are stored exactly as on disk (f32).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sensor: Array2<f32>,
    pub gradient: Array2<f32>,
    pub state_label: StateLabel<f32>,
    pub quality_label: Option<QualityClass>,
    pub noise_scale: f32,
}

impl Sample {
    pub fn dominant_state(&self) -> StateCode {
        self.state_label.argmax()
    }
}

/// Train/validation split policy; the test split is the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec { train_fraction: 0.8, val_fraction: 0.1, seed: 17 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_fraction >= 0.0
            && self.val_fraction >= 0.0
            && self.train_fraction + self.val_fraction <= 1.0;
        if !ok {
            return Err(Error::invalid("split fractions must be non-negative and sum to <= 1"));
        }
        Ok(())
    }

    /// Deterministic membership: shuffle indices with the split seed, then
    /// cut train/val prefixes (floor sizes); the rest is the test split.
    pub fn split_indices(&self, count: usize) -> Splits {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut seed::rng(self.seed));
        let n_train = (self.train_fraction * count as f64).floor() as usize;
        let n_val = (self.val_fraction * count as f64).floor() as usize;
        let val_end = (n_train + n_val).min(count);
        Splits {
            train: order[..n_train].to_vec(),
            val: order[n_train..val_end].to_vec(),
            test: order[val_end..].to_vec(),
        }
    }
}

/// Disjoint, exhaustive index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Everything that defines a dataset besides the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub kind: DatasetKind,
    pub count: usize,
    /// Square image side in pixels.
    pub image_pixels: usize,
    /// Window extent in mV along both plungers.
    pub window_span_mv: f64,
    /// Occupancy search bound passed to the simulator.
    pub occupancy_bound: u32,
    pub device_ranges: DeviceRanges<f64>,
    pub base_noise: NoiseParams<f64>,
    /// Noise-scale sweep range for the sweep kinds.
    pub sweep_min: f64,
    pub sweep_max: f64,
    /// Window centers are drawn uniformly from this voltage box.
    pub center_box_v1: Range<f64>,
    pub center_box_v2: Range<f64>,
    /// Required for [`DatasetKind::DqcLabeled`].
    pub thresholds: Option<QualityThresholds>,
    pub split: SplitSpec,
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be at least 1"));
        }
        if self.image_pixels < 2 {
            return Err(Error::invalid("image must be at least 2x2 pixels"));
        }
        if !(self.window_span_mv > 0.0) {
            return Err(Error::invalid("window span must be positive"));
        }
        if self.occupancy_bound == 0 {
            return Err(Error::invalid("occupancy bound must be positive"));
        }
        self.device_ranges.validate()?;
        self.base_noise.validate()?;
        for r in [&self.center_box_v1, &self.center_box_v2] {
            if !(r.max > r.min) {
                return Err(Error::invalid("center box must have positive extent"));
            }
        }
        if matches!(self.kind, DatasetKind::ThresholdSweep | DatasetKind::DqcLabeled)
            && !(self.sweep_min >= 0.0 && self.sweep_max > self.sweep_min)
        {
            return Err(Error::invalid("sweep range must satisfy 0 <= min < max"));
        }
        if self.kind == DatasetKind::DqcLabeled {
            match &self.thresholds {
                Some(t) => t.validate()?,
                None => {
                    return Err(Error::invalid(
                        "dqc-labeled generation needs calibrated thresholds",
                    ))
                }
            }
        }
        self.split.validate()?;
        Ok(())
    }

    /// Hash over the serialized config; stored in the manifest so a loaded
    /// dataset can be matched against the configuration that produced it.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Bytes per record for an H x W image pair.
pub fn record_bytes(height: usize, width: usize) -> usize {
    2 * height * width * 4 + STATE_COUNT * 4 + 1 + 4
}

fn encode_record(sample: &Sample, buf: &mut Vec<u8>) {
    for &v in sample.sensor.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in sample.gradient.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in sample.state_label.p.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(sample.quality_label.map_or(255, QualityClass::code));
    buf.extend_from_slice(&sample.noise_scale.to_le_bytes());
}

fn decode_record(buf: &[u8], height: usize, width: usize, index: usize) -> Result<Sample> {
    debug_assert_eq!(buf.len(), record_bytes(height, width));
    let pixels = height * width;
    let read_f32 = |at: usize| f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
    let read_map = |start: usize| {
        Array2::from_shape_fn((height, width), |(i, j)| read_f32(start + 4 * (i * width + j)))
    };
    let sensor = read_map(0);
    let gradient = read_map(4 * pixels);
    let mut p = [0.0f32; STATE_COUNT];
    for (k, v) in p.iter_mut().enumerate() {
        *v = read_f32(8 * pixels + 4 * k);
    }
    let state_label = StateLabel { p };
    state_label.validate().map_err(|e| Error::TruncatedRecord {
        index,
        reason: format!("state label does not normalize: {e}"),
    })?;
    let quality_byte = buf[8 * pixels + 4 * STATE_COUNT];
    let quality_label = match quality_byte {
        255 => None,
        code => Some(QualityClass::from_code(code).ok_or(Error::TruncatedRecord {
            index,
            reason: format!("quality code {code} is not valid"),
        })?),
    };
    let noise_scale = read_f32(8 * pixels + 4 * STATE_COUNT + 1);
    Ok(Sample { sensor, gradient, state_label, quality_label, noise_scale })
}

/// Numerical gradient of the sensor map along the plunger-1 (column) axis:
/// central differences inside, one-sided at the borders. `pitch` is the
/// voltage step per pixel, so the result is in signal per mV.
pub fn gradient_image<F: Float>(sensor: &Array2<F>, pitch: F) -> Array2<F> {
    let (rows, cols) = sensor.dim();
    assert!(cols >= 2, "gradient needs at least two columns");
    let two = fl::<F>(2.0);
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        if j == 0 {
            (sensor[[i, 1]] - sensor[[i, 0]]) / pitch
        } else if j == cols - 1 {
            (sensor[[i, j]] - sensor[[i, j - 1]]) / pitch
        } else {
            (sensor[[i, j + 1]] - sensor[[i, j - 1]]) / (two * pitch)
        }
    })
}

/// Draws the sample's device and window. Samples cycle through target states
/// by index; device/center pairs are redrawn until the window center sits in
/// the target state, falling back to the last valid draw so generation never
/// stalls on a hard-to-hit state.
fn draw_device_and_window(
    cfg: &GenerateConfig,
    sample_seed: u64,
    index: usize,
) -> Result<(crate::sim::DeviceParams<f64>, VoltageWindow<f64>)> {
    let device_stream = seed::derive(sample_seed, 0);
    let center_stream = seed::derive(sample_seed, 1);
    let target = StateCode::from_index(index % STATE_COUNT).unwrap();

    let mut kept: Option<(crate::sim::DeviceParams<f64>, f64, f64, u64)> = None;
    for attempt in 0..CENTER_ATTEMPTS {
        let device = sample_device::<f64>(seed::derive(device_stream, attempt), &cfg.device_ranges)?;
        let mut rng = seed::rng(seed::derive(center_stream, attempt));
        let c1 = rng.random_range(cfg.center_box_v1.min..cfg.center_box_v1.max);
        let c2 = rng.random_range(cfg.center_box_v2.min..cfg.center_box_v2.max);
        let state = match compute_charge_config(&device, c1, c2, cfg.occupancy_bound) {
            Ok(occ) => classify_occupancy(&device, occ),
            Err(Error::OccupancyBound { .. }) => continue,
            Err(e) => return Err(e),
        };
        kept = Some((device, c1, c2, attempt));
        if state == target {
            break;
        }
    }
    let (device, c1, c2, attempt) = kept.ok_or(Error::SamplingExhausted {
        what: "no window center stayed within the occupancy bound".into(),
        attempts: CENTER_ATTEMPTS as usize,
    })?;

    // off-center jitter so transition lines cross the window at varied
    // positions instead of always through the middle
    let mut rng = seed::rng(seed::derive(seed::derive(center_stream, attempt), 1));
    let j1 = rng.random_range(-0.25..0.25) * cfg.window_span_mv;
    let j2 = rng.random_range(-0.25..0.25) * cfg.window_span_mv;
    let window = VoltageWindow::centered(
        c1 + j1,
        c2 + j2,
        cfg.window_span_mv,
        cfg.image_pixels,
    );
    Ok((device, window))
}

/// Generates the `index`-th sample of the dataset defined by (cfg, seed).
pub fn generate_sample(cfg: &GenerateConfig, master_seed: u64, index: usize) -> Result<Sample> {
    let sample_seed = seed::derive(master_seed, index as u64);
    let (device, window) = draw_device_and_window(cfg, sample_seed, index)?;
    let scan = simulate_scan(&device, &window, cfg.occupancy_bound)?;
    let label = label_scan(&scan);

    let params_seed = seed::derive(sample_seed, 2);
    let apply_seed = seed::derive(sample_seed, 3);
    let (noisy, scale) = match cfg.kind {
        DatasetKind::Noiseless => (scan.sensor.clone(), 0.0),
        DatasetKind::PerNoise(kind) => {
            let params = sample_noise_params(
                &cfg.base_noise.isolated(kind),
                NoiseSampleMode::PerNoiseOnePercent,
                params_seed,
            );
            (apply_noise(&device, &scan, &params, apply_seed, cfg.occupancy_bound)?, params.noise_scale)
        }
        DatasetKind::Combined => {
            let params =
                sample_noise_params(&cfg.base_noise, NoiseSampleMode::JointThird, params_seed);
            (apply_noise(&device, &scan, &params, apply_seed, cfg.occupancy_bound)?, params.noise_scale)
        }
        DatasetKind::ThresholdSweep | DatasetKind::DqcLabeled => {
            let mode = NoiseSampleMode::ThresholdSweep { min: cfg.sweep_min, max: cfg.sweep_max };
            let params = sample_noise_params(&cfg.base_noise, mode, params_seed);
            (apply_noise(&device, &scan, &params, apply_seed, cfg.occupancy_bound)?, params.noise_scale)
        }
    };
    let gradient = gradient_image(&noisy, window.pitch_v1());

    let quality_label = match cfg.kind {
        DatasetKind::DqcLabeled => Some(assign_quality(
            scale,
            label.argmax(),
            cfg.thresholds.as_ref().expect("validated"),
        )),
        _ => None,
    };
    Ok(Sample {
        sensor: noisy.mapv(|v| v as f32),
        gradient: gradient.mapv(|v| v as f32),
        state_label: StateLabel { p: label.p.map(|v| v as f32) },
        quality_label,
        noise_scale: scale as f32,
    })
}

/// Manifest stored next to the record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub dtype: String,
    pub record_bytes: usize,
    /// Byte offset of every record in samples.bin, strictly increasing.
    pub offsets: Vec<u64>,
    pub master_seed: u64,
    pub split: SplitSpec,
    pub config_sha256: String,
    pub samples_sha256: String,
    pub tool_version: String,
}

/// Generates all samples (in parallel), writes `samples.bin` then commits
/// `manifest.json`. Regeneration with the same inputs is byte-identical.
pub fn generate_dataset(
    cfg: &GenerateConfig,
    master_seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;

    let records: Vec<Vec<u8>> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(cfg, master_seed, i)?;
            if sample.quality_label.is_some() != (cfg.kind == DatasetKind::DqcLabeled) {
                return Err(Error::invalid("quality labels present iff dataset is dqc-labeled"));
            }
            let mut buf = Vec::with_capacity(record_bytes(cfg.image_pixels, cfg.image_pixels));
            encode_record(&sample, &mut buf);
            Ok(buf)
        })
        .collect::<Result<_>>()?;

    let bin_path = dir.join("samples.bin");
    let mut writer = BufWriter::new(File::create(&bin_path)?);
    let mut hasher = Sha256::new();
    let mut offsets = Vec::with_capacity(cfg.count);
    let mut offset = 0u64;
    for rec in &records {
        writer.write_all(rec)?;
        hasher.update(rec);
        offsets.push(offset);
        offset += rec.len() as u64;
    }
    writer.flush()?;

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        kind: cfg.kind,
        count: cfg.count,
        image_height: cfg.image_pixels,
        image_width: cfg.image_pixels,
        dtype: DTYPE_TAG.into(),
        record_bytes: record_bytes(cfg.image_pixels, cfg.image_pixels),
        offsets,
        master_seed,
        split: cfg.split,
        config_sha256: cfg.sha256(),
        samples_sha256: hex(&hasher.finalize()),
        tool_version: crate::VERSION.into(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Open dataset handle; random access goes through positioned reads, so a
/// shared reference is enough for concurrent readers.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    file: File,
}

impl Dataset {
    /// Parses and cross-checks the manifest against the record file size.
    /// The payload checksum is not verified here (it needs a full read); use
    /// [`Dataset::verify_checksum`] or a full [`Dataset::iter`] pass for that.
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let corrupt = |reason: String| Error::CorruptManifest {
            path: manifest_path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;

        if manifest.format != DATASET_FORMAT {
            return Err(corrupt(format!("unknown format {:?}", manifest.format)));
        }
        if manifest.version != DATASET_VERSION {
            return Err(corrupt(format!("unsupported version {}", manifest.version)));
        }
        if manifest.dtype != DTYPE_TAG {
            return Err(corrupt(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        let expect_rec = record_bytes(manifest.image_height, manifest.image_width);
        if manifest.record_bytes != expect_rec {
            return Err(corrupt(format!(
                "record_bytes {} does not match image shape (expected {expect_rec})",
                manifest.record_bytes
            )));
        }
        if manifest.offsets.len() != manifest.count {
            return Err(corrupt(format!(
                "{} offsets for {} records",
                manifest.offsets.len(),
                manifest.count
            )));
        }
        for (i, pair) in manifest.offsets.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(corrupt(format!("offsets not strictly increasing at {i}")));
            }
        }
        for (i, &off) in manifest.offsets.iter().enumerate() {
            if off != (i * expect_rec) as u64 {
                return Err(corrupt(format!("offset {i} does not match the fixed record size")));
            }
        }
        manifest.split.validate()?;

        let file = File::open(dir.join("samples.bin"))?;
        let size = file.metadata()?.len();
        let expected = (manifest.count * expect_rec) as u64;
        if size < expected {
            return Err(Error::TruncatedRecord {
                index: (size as usize) / expect_rec,
                reason: format!("samples.bin holds {size} bytes, manifest expects {expected}"),
            });
        }
        if size > expected {
            return Err(corrupt(format!(
                "samples.bin holds {size} bytes, {} more than the manifest records",
                size - expected
            )));
        }
        Ok(Dataset { manifest, dir: dir.to_path_buf(), file })
    }

    pub fn count(&self) -> usize {
        self.manifest.count
    }

    pub fn kind(&self) -> DatasetKind {
        self.manifest.kind
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.manifest.image_height, self.manifest.image_width)
    }

    /// Reads one record.
    pub fn read_sample(&self, index: usize) -> Result<Sample> {
        if index >= self.manifest.count {
            return Err(Error::invalid(format!(
                "sample {index} out of range (count {})",
                self.manifest.count
            )));
        }
        let mut buf = vec![0u8; self.manifest.record_bytes];
        self.file
            .read_exact_at(&mut buf, self.manifest.offsets[index])
            .map_err(|e| Error::TruncatedRecord { index, reason: e.to_string() })?;
        decode_record(&buf, self.manifest.image_height, self.manifest.image_width, index)
    }

    /// Streaming reader over all records in order. The payload hash is
    /// accumulated along the way; if it does not match the manifest, the
    /// iterator's final item is a checksum error.
    pub fn iter(&self) -> Result<SampleIter> {
        Ok(SampleIter {
            file: File::open(self.dir.join("samples.bin"))?,
            manifest: self.manifest.clone(),
            next_index: 0,
            hasher: Some(Sha256::new()),
            finished: false,
        })
    }

    /// Re-hashes the payload and compares with the manifest.
    pub fn verify_checksum(&self) -> Result<()> {
        let mut file = File::open(self.dir.join("samples.bin"))?;
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        loop {
            let n = file.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let actual = hex(&hasher.finalize());
        if actual != self.manifest.samples_sha256 {
            return Err(Error::ChecksumMismatch {
                expected: self.manifest.samples_sha256.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Deterministic split membership from the manifest's split spec.
    pub fn splits(&self) -> Splits {
        self.manifest.split.split_indices(self.manifest.count)
    }
}

/// See [`Dataset::iter`].
pub struct SampleIter {
    file: File,
    manifest: DatasetManifest,
    next_index: usize,
    hasher: Option<Sha256>,
    finished: bool,
}

impl Iterator for SampleIter {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index < self.manifest.count {
            let index = self.next_index;
            self.next_index += 1;
            let mut buf = vec![0u8; self.manifest.record_bytes];
            if let Err(e) = self.file.read_exact(&mut buf) {
                self.finished = true;
                return Some(Err(Error::TruncatedRecord { index, reason: e.to_string() }));
            }
            if let Some(h) = self.hasher.as_mut() {
                h.update(&buf);
            }
            return Some(decode_record(
                &buf,
                self.manifest.image_height,
                self.manifest.image_width,
                index,
            ));
        }
        self.finished = true;
        let actual = hex(&self.hasher.take().expect("hashing active").finalize());
        if actual != self.manifest.samples_sha256 {
            return Some(Err(Error::ChecksumMismatch {
                expected: self.manifest.samples_sha256.clone(),
                actual,
            }));
        }
        None
    }
}

/// Loads gradient images as network input (N, 1, H, W) with the fractional
/// state labels (N, 5).
pub fn load_gradient_batch<F: Float>(
    ds: &Dataset,
    indices: &[usize],
) -> Result<(Array4<F>, ndarray::Array2<F>)> {
    let (h, w) = ds.image_shape();
    let mut x = Array4::zeros((indices.len(), 1, h, w));
    let mut y = ndarray::Array2::zeros((indices.len(), STATE_COUNT));
    for (row, &idx) in indices.iter().enumerate() {
        let s = ds.read_sample(idx)?;
        for i in 0..h {
            for j in 0..w {
                x[[row, 0, i, j]] = fl(s.gradient[[i, j]] as f64);
            }
        }
        for k in 0..STATE_COUNT {
            y[[row, k]] = fl(s.state_label.p[k] as f64);
        }
    }
    Ok((x, y))
}

/// Loads gradient images with one-hot quality targets (N, 3). Fails if any
/// requested sample lacks a quality label.
pub fn load_quality_batch<F: Float>(
    ds: &Dataset,
    indices: &[usize],
) -> Result<(Array4<F>, ndarray::Array2<F>)> {
    let (h, w) = ds.image_shape();
    let mut x = Array4::zeros((indices.len(), 1, h, w));
    let mut y = ndarray::Array2::zeros((indices.len(), QualityClass::ALL.len()));
    for (row, &idx) in indices.iter().enumerate() {
        let s = ds.read_sample(idx)?;
        let q = s.quality_label.ok_or_else(|| {
            Error::invalid(format!("sample {idx} carries no quality label"))
        })?;
        for i in 0..h {
            for j in 0..w {
                x[[row, 0, i, j]] = fl(s.gradient[[i, j]] as f64);
            }
        }
        y[[row, q.index()]] = F::one();
    }
    Ok((x, y))
}

/// Recorded noise scales for the given records.
pub fn load_noise_scales(ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    indices.iter().map(|&i| Ok(ds.read_sample(i)?.noise_scale as f64)).collect()
}

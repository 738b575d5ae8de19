//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value violates a documented invariant.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The ground-state search hit the occupancy bound, so the returned
    /// configuration would not be trustworthy.
    #[error("charge configuration search hit the occupancy bound {bound}; enlarge the bound or shrink the voltage window")]
    OccupancyBound { bound: u32 },

    /// Rejection sampling failed to produce a valid draw.
    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { what: String, attempts: usize },

    /// A dataset or checkpoint manifest could not be parsed or is internally
    /// inconsistent.
    #[error("corrupt manifest at {path}: {reason}")]
    CorruptManifest { path: String, reason: String },

    /// The binary payload of a dataset ends before the indexed record.
    #[error("truncated record {index}: {reason}")]
    TruncatedRecord { index: usize, reason: String },

    /// The binary payload does not match the checksum stored in the manifest.
    #[error("payload checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    /// A network description is not buildable.
    #[error("invalid network spec at layer {layer}: {reason}")]
    NetworkSpec { layer: usize, reason: String },

    /// Tensor shapes passed to a network or layer do not match.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    /// A checkpoint cannot be loaded into the requested network.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    /// A quality-calibration curve has no usable dynamic range.
    #[error("calibration curve for state {state} is flat (range {range:.3e}); thresholds would be meaningless")]
    FlatCurve { state: &'static str, range: f64 },

    /// A per-state partition needed for calibration contains no samples.
    #[error("no calibration samples for state {state}")]
    EmptyPartition { state: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

//! Scalar abstraction for the numeric code.
//!
//! All simulation and network routines are generic over [`Float`] so they can
//! run in `f32` or `f64`. Random draws are always made in `f64` and then
//! converted, so the sampled streams are identical across scalar types.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float as NumFloat, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};

/// Trait bound for every scalar used by the simulator and the networks.
pub trait Float:
    NumFloat
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + rustfft::FftNum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Scalar name recorded in binary manifests ("f32" or "f64").
    const DTYPE: &'static str;

    /// Width in bytes of the little-endian on-disk encoding.
    const BYTE_WIDTH: usize;

    /// Lossy conversion from `f64`, used to inject sampled values and constants.
    fn from_f64_lossy(x: f64) -> Self;

    /// Widening conversion to `f64`, used for statistics and serialization.
    fn to_f64_lossy(self) -> f64;

    /// Appends the little-endian encoding to a byte buffer.
    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `BYTE_WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("expected 4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("expected 8 bytes"))
    }
}

/// Shorthand for `F::from_f64_lossy` used all over the numeric code.
#[inline]
pub fn fl<F: Float>(x: f64) -> F {
    F::from_f64_lossy(x)
}

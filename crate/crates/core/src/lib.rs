//! Core library for `qdtune`: simulation of double quantum dot charge-stability
//! diagrams, physics-based synthetic noise, dataset generation, small CNNs with
//! reverse-mode gradients, device-state and data-quality classifiers, and a
//! quality-gated autotuning loop.
//!
//! Everything runs on synthetic data and is deterministic given a master seed.
//! Numeric routines are generic over the scalar type via [`Float`]; the crate
//! exports two concrete aliases used throughout the tooling:
//!
//! * [`SimScalar`] (`f64`) for simulation, noise synthesis, and calibration,
//! * [`NetScalar`] (`f32`) for network training and inference.

pub mod autotune;
pub mod config;
pub mod dataset;
pub mod dqc;
pub mod dse;
pub mod error;
pub mod float;
pub mod noise;
pub mod nn;
pub mod render;
pub mod seed;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use float::Float;

/// Scalar type used by the simulator, noise synthesis, and calibration.
pub type SimScalar = f64;

/// Scalar type used by network training and inference.
pub type NetScalar = f32;

/// Version string recorded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! `qdtune tune`: run the gated autotuning loop on the simulated device with
//! trained quality and state ensembles, logging one JSON record per step.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use qdtune_core::autotune::{
    run_tuning, EnsembleEstimator, EnsembleGate, SimulatedEnvironment, TuneConfig, TuneOutcome,
};
use qdtune_core::noise::{NoiseMask, NoiseParams};
use qdtune_core::sim::{DeviceParams, StateLabel};

use crate::io;

#[derive(Serialize)]
struct TuneRunDocument {
    command: String,
    tool_version: String,
    device: DeviceParams<f64>,
    noise: NoiseParams<f64>,
    target: String,
    start: (f64, f64),
    budget: usize,
    master_seed: u64,
    tune: TuneConfig,
    outcome: TuneOutcome,
}

#[derive(clap::Args)]
pub struct TuneArgs {
    /// TOML device description; defaults to the reference device.
    #[arg(long)]
    pub device_config: Option<PathBuf>,
    /// Starting noise scale of the simulated environment.
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
    /// Target device state: ND, LD, CD, RD, or DD.
    #[arg(long)]
    pub target: String,
    /// Recalibrations allowed; defaults to the config value.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed for the environment's measurement noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Starting plunger voltages as 'V1,V2' in mV; defaults to the center of
    /// the search bounds.
    #[arg(long)]
    pub start: Option<String>,
    /// Step log output path (JSON lines).
    #[arg(long)]
    pub log: PathBuf,
    /// State-estimator ensemble directory.
    #[arg(long)]
    pub dse: PathBuf,
    /// Quality-gate ensemble directory.
    #[arg(long)]
    pub dqc: PathBuf,
    /// TOML file overriding the embedded defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_device(path: &Path) -> Result<DeviceParams<f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read device config {}", path.display()))?;
    let device: DeviceParams<f64> =
        toml::from_str(&text).with_context(|| format!("bad device config {}", path.display()))?;
    device.validate()?;
    Ok(device)
}

fn parse_start(s: &str) -> Result<(f64, f64)> {
    let err = || format!("--start wants 'V1,V2' in mV, got '{s}'");
    let (a, b) = s.split_once(',').with_context(err)?;
    Ok((a.trim().parse().with_context(err)?, b.trim().parse().with_context(err)?))
}

pub fn run(args: &TuneArgs) -> Result<()> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let device = match &args.device_config {
        Some(path) => load_device(path)?,
        None => defaults.device.clone(),
    };
    let cfg = defaults.tune.config;
    let budget = args.budget.unwrap_or(defaults.tune.budget);
    let start = match &args.start {
        Some(s) => parse_start(s)?,
        None => (
            0.5 * (cfg.bounds_v1.min + cfg.bounds_v1.max),
            0.5 * (cfg.bounds_v2.min + cfg.bounds_v2.max),
        ),
    };
    let target_state = io::parse_state(&args.target)?;
    let target = StateLabel::<f64>::one_hot(target_state);

    let dse_nets = io::load_ensemble(&args.dse)?;
    let dqc_nets = io::load_ensemble(&args.dqc)?;
    let gate = EnsembleGate { nets: &dqc_nets };
    let estimator = EnsembleEstimator { nets: &dse_nets, clip: false };

    let noise = defaults.noise.params(NoiseMask::standard(), args.noise_scale);
    let mut env = SimulatedEnvironment::new(
        device.clone(),
        noise.clone(),
        defaults.sampling.occupancy_bound,
        args.seed,
    );

    let outcome = run_tuning(&gate, &estimator, &mut env, &target, &cfg, start, budget)?;

    let mut lines = String::new();
    for record in &outcome.state.log {
        writeln!(lines, "{}", serde_json::to_string(record)?)?;
    }
    if let Some(parent) = args.log.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.log, lines)?;

    let doc = TuneRunDocument {
        command: "tune".into(),
        tool_version: qdtune_core::VERSION.into(),
        device,
        noise,
        target: target_state.name().into(),
        start,
        budget,
        master_seed: args.seed,
        tune: cfg,
        outcome,
    };
    io::write_json(&args.log.with_extension("run.json"), &doc)?;

    let o = &doc.outcome;
    println!(
        "{} after {} steps at ({:.2}, {:.2}) mV; target {} reached: {}",
        o.termination, o.steps, o.state.v1, o.state.v2, doc.target, o.succeeded
    );
    Ok(())
}

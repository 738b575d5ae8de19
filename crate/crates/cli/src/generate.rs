//! `qdtune generate`: synthesize a dataset directory from the resolved
//! defaults, or replay a previously written run manifest byte-for-byte.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qdtune_core::dataset::{generate_dataset, DatasetKind, GenerateConfig};
use qdtune_core::dqc::load_thresholds;

use crate::io;

#[derive(Serialize, Deserialize)]
pub struct GenerateManifestConfig {
    pub master_seed: u64,
    pub generate: GenerateConfig,
}

#[derive(clap::Args)]
pub struct GenerateArgs {
    /// Dataset kind: noiseless, combined, threshold-sweep, dqc-labeled, or
    /// per-noise-{dot-jumps,coulomb-peak,pink,white,sensor-jumps}.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub kind: Option<String>,
    /// Number of samples to draw.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub count: Option<usize>,
    /// Master seed for device and noise draws.
    #[arg(long, default_value_t = 0, conflicts_with = "manifest")]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding the embedded defaults.
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Calibrated thresholds JSON; required for dqc-labeled.
    #[arg(long, conflicts_with = "manifest")]
    pub thresholds: Option<PathBuf>,
    /// Replay the run recorded in this run_manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let (cfg, seed) = match &args.manifest {
        Some(path) => replayed_config(path)?,
        None => fresh_config(args)?,
    };
    let (count, kind) = (cfg.count, cfg.kind.name());

    let guard = io::RunGuard::begin(&args.out)?;
    let manifest = generate_dataset(&cfg, seed, &args.out)?;
    io::write_run_manifest(
        &args.out,
        "generate",
        GenerateManifestConfig { master_seed: seed, generate: cfg },
    )?;
    guard.finish()?;

    println!(
        "wrote {count} {kind} samples to {} (payload sha256 {})",
        args.out.display(),
        &manifest.samples_sha256[..12]
    );
    Ok(())
}

fn fresh_config(args: &GenerateArgs) -> Result<(GenerateConfig, u64)> {
    let defaults = io::load_defaults(args.config.as_deref())?;
    let kind = io::parse_kind(args.kind.as_deref().expect("clap requires --kind"))?;
    let count = args.count.expect("clap requires --count");

    let thresholds = match (&args.thresholds, kind) {
        (Some(path), DatasetKind::DqcLabeled) => Some(load_thresholds(path)?.thresholds),
        (None, DatasetKind::DqcLabeled) => {
            bail!("--kind dqc-labeled needs --thresholds <calibrated json>")
        }
        (Some(_), _) => bail!("--thresholds only applies to --kind dqc-labeled"),
        (None, _) => None,
    };

    Ok((defaults.generate_config(kind, count, thresholds), args.seed))
}

fn replayed_config(path: &Path) -> Result<(GenerateConfig, u64)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest {}", path.display()))?;
    let manifest: io::RunManifest<GenerateManifestConfig> = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a generate run manifest", path.display()))?;
    if manifest.command != "generate" {
        bail!("{} records a '{}' run, not generate", path.display(), manifest.command);
    }
    Ok((manifest.config.generate, manifest.config.master_seed))
}

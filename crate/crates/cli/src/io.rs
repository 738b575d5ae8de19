//! Shared plumbing: run guards, manifest writing, ensemble checkpoint
//! directories, and string-to-domain parsers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qdtune_core::config::Defaults;
use qdtune_core::dataset::{Dataset, DatasetKind};
use qdtune_core::nn::{load_network, save_network, Network};
use qdtune_core::noise::NoiseKind;
use qdtune_core::sim::StateCode;
use qdtune_core::NetScalar;

/// Marker dropped into an output directory while a run is in flight. A crash
/// leaves it behind, flagging the directory as partial; `finish` removes it.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub struct RunGuard {
    marker: PathBuf,
}

impl RunGuard {
    pub fn begin(dir: &Path) -> Result<RunGuard> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let marker = dir.join(INCOMPLETE_MARKER);
        fs::write(&marker, "run in progress or aborted; outputs may be partial\n")?;
        Ok(RunGuard { marker })
    }

    pub fn finish(self) -> Result<()> {
        fs::remove_file(&self.marker)?;
        Ok(())
    }
}

/// Pretty JSON with a trailing newline; creates parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Envelope written as `run_manifest.json` by every command. Holds the full
/// resolved configuration, so feeding it back reproduces the run.
#[derive(Serialize, Deserialize)]
pub struct RunManifest<T> {
    pub command: String,
    pub tool_version: String,
    pub config: T,
}

pub fn write_run_manifest<T: Serialize>(dir: &Path, command: &str, config: T) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        tool_version: qdtune_core::VERSION.into(),
        config,
    };
    write_json(&dir.join("run_manifest.json"), &manifest)
}

pub fn load_defaults(path: Option<&Path>) -> Result<Defaults> {
    match path {
        Some(p) => Defaults::from_path(p)
            .with_context(|| format!("cannot load config {}", p.display())),
        None => Ok(Defaults::builtin()),
    }
}

pub fn save_ensemble(dir: &Path, nets: &[Network<NetScalar>]) -> Result<()> {
    for (i, net) in nets.iter().enumerate() {
        save_network(net, &dir.join(format!("model-{i:03}")))?;
    }
    Ok(())
}

/// Loads every `model-*` subdirectory, sorted by name.
pub fn load_ensemble(dir: &Path) -> Result<Vec<Network<NetScalar>>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("cannot read checkpoint directory {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("model-"))
        .collect();
    if names.is_empty() {
        bail!("no model-* checkpoints under {}", dir.display());
    }
    names.sort();
    names
        .iter()
        .map(|n| {
            load_network::<NetScalar>(&dir.join(n))
                .with_context(|| format!("cannot load checkpoint {n}"))
        })
        .collect()
}

pub fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("cannot open dataset {}", dir.display()))
}

pub fn parse_kind(s: &str) -> Result<DatasetKind> {
    let kind = match s {
        "noiseless" => DatasetKind::Noiseless,
        "combined" => DatasetKind::Combined,
        "threshold-sweep" => DatasetKind::ThresholdSweep,
        "dqc-labeled" => DatasetKind::DqcLabeled,
        other => match other.strip_prefix("per-noise-") {
            Some(rest) => {
                let k = NoiseKind::ALL
                    .into_iter()
                    .find(|k| k.name() == rest)
                    .with_context(|| format!("unknown noise channel '{rest}'"))?;
                DatasetKind::PerNoise(k)
            }
            None => bail!(
                "unknown dataset kind '{other}'; expected noiseless, combined, \
                 threshold-sweep, dqc-labeled, or per-noise-<channel>"
            ),
        },
    };
    Ok(kind)
}

pub fn parse_state(s: &str) -> Result<StateCode> {
    StateCode::ALL
        .into_iter()
        .find(|c| c.name().eq_ignore_ascii_case(s))
        .with_context(|| format!("unknown device state '{s}'; expected ND, LD, CD, RD, or DD"))
}

/// Indices of one named split, or the whole dataset for "all".
pub fn split_indices(ds: &Dataset, split: &str) -> Result<Vec<usize>> {
    let splits = ds.splits();
    let idx = match split {
        "train" => splits.train,
        "val" => splits.val,
        "test" => splits.test,
        "all" => (0..ds.count()).collect(),
        other => bail!("unknown split '{other}'; expected train, val, test, or all"),
    };
    if idx.is_empty() {
        bail!("split '{split}' selects no samples");
    }
    Ok(idx)
}

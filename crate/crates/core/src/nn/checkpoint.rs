//! Checkpoint serialization: a JSON manifest describing the spec and tensor
//! layout, plus a little-endian binary blob holding parameters and Adam state.

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::float::Float;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT: &str = "qdtune-network";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    dtype: String,
    tool_version: String,
    spec: NetworkSpec,
    input_hw: (usize, usize),
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// Writes `network.json` and `weights.bin` into `dir` (created if missing).
pub fn save_network<F: Float>(net: &Network<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let groups: [(&str, &[ArrayD<F>]); 3] = [
        ("param", net.params()),
        ("adam_m", &net.adam_m),
        ("adam_v", &net.adam_v),
    ];
    for (prefix, group) in groups {
        for (tensor, name) in group.iter().zip(net.tensor_names()) {
            tensors.push(TensorEntry {
                name: format!("{prefix}.{name}"),
                shape: tensor.shape().to_vec(),
                offset: blob.len() as u64,
                len: tensor.len(),
            });
            for &x in tensor.iter() {
                x.write_le(&mut blob);
            }
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: F::DTYPE.into(),
        tool_version: crate::VERSION.into(),
        spec: net.spec.clone(),
        input_hw: net.input_hw,
        step: net.step,
        tensors,
    };
    fs::write(dir.join("network.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_network`]. The scalar type must match
/// the stored dtype; shapes are validated against a freshly built network.
pub fn load_network<F: Float>(dir: &Path) -> Result<Network<F>> {
    let manifest_path = dir.join("network.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: checkpoint holds {}, requested {}",
            manifest.dtype,
            F::DTYPE
        )));
    }

    let mut net = Network::<F>::build(&manifest.spec, manifest.input_hw, 0)?;
    let blob = fs::read(dir.join("weights.bin"))?;
    let expected = net.params().len() * 3;
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} tensors, manifest lists {}",
            manifest.tensors.len()
        )));
    }

    let width = F::BYTE_WIDTH;
    let read_tensor = |entry: &TensorEntry, target: &mut ArrayD<F>| -> Result<()> {
        if entry.shape != target.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * width;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns the weight blob",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(entry.len);
        for chunk in blob[start..end].chunks_exact(width) {
            values.push(F::read_le(chunk));
        }
        *target = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).unwrap();
        Ok(())
    };

    let per_group = net.params().len();
    for i in 0..per_group {
        let entry = &manifest.tensors[i];
        let mut t = net.params()[i].clone();
        read_tensor(entry, &mut t)?;
        net.params_mut()[i] = t;
    }
    for i in 0..per_group {
        let entry = &manifest.tensors[per_group + i];
        let mut t = net.adam_m[i].clone();
        read_tensor(entry, &mut t)?;
        net.adam_m[i] = t;
    }
    for i in 0..per_group {
        let entry = &manifest.tensors[2 * per_group + i];
        let mut t = net.adam_v[i].clone();
        read_tensor(entry, &mut t)?;
        net.adam_v[i] = t;
    }
    net.step = manifest.step;
    Ok(net)
}

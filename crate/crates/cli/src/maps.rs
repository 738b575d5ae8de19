//! Map bundles and `qdtune render-maps`. A bundle is a directory holding
//! `scan.json` plus raw float tensors in the dataset binary convention;
//! rendering turns those into portable graymap/pixmap images.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use qdtune_core::autotune::MapEvaluation;
use qdtune_core::dqc::QualityClass;
use qdtune_core::render::{
    quality_map_rgb, read_tensor, state_map_rgb, write_pgm, write_ppm, write_tensor,
};
use qdtune_core::sim::{StabilityScan, VoltageWindow};

use crate::io;

pub const SCAN_FORMAT: &str = "qdtune-map-scan";

/// Index document of a map bundle. Tensor paths are relative to it.
#[derive(Serialize, Deserialize)]
pub struct ScanDocument {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub window: VoltageWindow<f64>,
    /// Noise scale at the right edge of the ramp.
    pub max_scale: f64,
    pub master_seed: u64,
    pub sensor: String,
    pub predictions: Option<String>,
    pub quality: Option<String>,
    pub window_pixels: Option<usize>,
    pub margin_px: Option<usize>,
}

/// Writes `scan.json` + `sensor.f32`, and the prediction/quality tensors when
/// an evaluation is given.
pub fn write_bundle(
    dir: &Path,
    scan: &StabilityScan<f64>,
    evaluation: Option<&MapEvaluation>,
    max_scale: f64,
    master_seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (rows, cols) = scan.sensor.dim();
    let sensor: Vec<f32> = scan.sensor.iter().map(|&v| v as f32).collect();
    write_tensor(&dir.join("sensor.f32"), &[rows, cols], &sensor)?;

    if let Some(eval) = evaluation {
        let (r, c, k) = eval.predictions.dim();
        let preds: Vec<f32> = eval.predictions.iter().map(|&v| v as f32).collect();
        write_tensor(&dir.join("predictions.f32"), &[r, c, k], &preds)?;
        let quality: Vec<f32> = eval.quality.iter().map(|&q| q.code() as f32).collect();
        write_tensor(&dir.join("quality.f32"), &[r, c], &quality)?;
    }

    let doc = ScanDocument {
        format: SCAN_FORMAT.into(),
        version: 1,
        tool_version: qdtune_core::VERSION.into(),
        window: scan.window,
        max_scale,
        master_seed,
        sensor: "sensor.f32".into(),
        predictions: evaluation.map(|_| "predictions.f32".into()),
        quality: evaluation.map(|_| "quality.f32".into()),
        window_pixels: evaluation.map(|e| e.window_pixels),
        margin_px: evaluation.map(|e| e.margin_px),
    };
    io::write_json(&dir.join("scan.json"), &doc)
}

fn copy_with_sidecar(src_dir: &Path, out_dir: &Path, name: &str) -> Result<()> {
    for file in [name.to_string(), format!("{name}.json")] {
        std::fs::copy(src_dir.join(&file), out_dir.join(&file))
            .with_context(|| format!("cannot copy {file}"))?;
    }
    Ok(())
}

#[derive(clap::Args)]
pub struct RenderArgs {
    /// Map bundle directory or its scan.json.
    #[arg(long)]
    pub scan: PathBuf,
    /// Output directory for images and copied tensors.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RenderManifestConfig {
    scan: String,
    rendered: Vec<String>,
}

/// Renders a bundle into `out`, copying the tensors through so the output
/// directory is a complete artifact on its own. Returns the image names.
pub fn render_bundle(scan: &Path, out: &Path) -> Result<Vec<String>> {
    let scan_path = if scan.is_dir() { scan.join("scan.json") } else { scan.to_path_buf() };
    let src_dir = scan_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let text = std::fs::read_to_string(&scan_path)
        .with_context(|| format!("cannot read {}", scan_path.display()))?;
    let doc: ScanDocument = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a map scan document", scan_path.display()))?;
    if doc.format != SCAN_FORMAT || doc.version != 1 {
        bail!("unsupported scan document {}/{}", doc.format, doc.version);
    }

    std::fs::create_dir_all(out)?;
    let mut rendered = Vec::new();

    let (shape, values) = read_tensor(&src_dir.join(&doc.sensor))?;
    if shape.len() != 2 {
        bail!("sensor tensor must be 2-d, got {shape:?}");
    }
    let sensor = Array2::from_shape_vec((shape[0], shape[1]), values)?.mapv(f64::from);
    write_pgm(&out.join("sensor.pgm"), &sensor)?;
    rendered.push("sensor.pgm".to_string());

    if let Some(name) = &doc.predictions {
        let (shape, values) = read_tensor(&src_dir.join(name))?;
        if shape.len() != 3 {
            bail!("prediction tensor must be 3-d, got {shape:?}");
        }
        let preds =
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), values)?.mapv(f64::from);
        write_ppm(&out.join("states.ppm"), &state_map_rgb(&preds))?;
        rendered.push("states.ppm".to_string());
    }

    if let Some(name) = &doc.quality {
        let (shape, values) = read_tensor(&src_dir.join(name))?;
        if shape.len() != 2 {
            bail!("quality tensor must be 2-d, got {shape:?}");
        }
        let codes: Result<Vec<QualityClass>> = values
            .iter()
            .map(|&v| {
                QualityClass::from_code(v as u8)
                    .with_context(|| format!("bad quality code {v} in {name}"))
            })
            .collect();
        let quality = Array2::from_shape_vec((shape[0], shape[1]), codes?)?;
        write_ppm(&out.join("quality.ppm"), &quality_map_rgb(&quality))?;
        rendered.push("quality.ppm".to_string());
    }

    if src_dir.canonicalize()? != out.canonicalize()? {
        std::fs::copy(&scan_path, out.join("scan.json"))?;
        copy_with_sidecar(&src_dir, out, &doc.sensor)?;
        for name in doc.predictions.iter().chain(doc.quality.iter()) {
            copy_with_sidecar(&src_dir, out, name)?;
        }
    }
    Ok(rendered)
}

pub fn run(args: &RenderArgs) -> Result<()> {
    let guard = io::RunGuard::begin(&args.out)?;
    let rendered = render_bundle(&args.scan, &args.out)?;
    io::write_run_manifest(
        &args.out,
        "render-maps",
        RenderManifestConfig {
            scan: args.scan.display().to_string(),
            rendered: rendered.clone(),
        },
    )?;
    guard.finish()?;

    println!("rendered {} into {}", rendered.join(", "), args.out.display());
    Ok(())
}

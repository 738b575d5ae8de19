//! Figure and image output: portable graymaps for raw scans, hue-averaged
//! state maps and quality maps as pixmaps, raw float tensors in the dataset
//! binary convention, and SVG box plots for accuracy tables.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dqc::QualityClass;
use crate::error::{Error, Result};
use crate::sim::{StateCode, STATE_COUNT};
use crate::stats::BoxStats;

/// Writes a min-max normalized 8-bit binary graymap (P5). A constant map
/// lands on mid-gray.
pub fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (rows, cols) = map.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("cannot render an empty map"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.reserve(rows * cols);
    for &v in map.iter() {
        let g = if !v.is_finite() {
            0
        } else if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        };
        bytes.push(g);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes an (rows, cols, 3) byte array as a binary pixmap (P6).
pub fn write_ppm(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (rows, cols, channels) = rgb.dim();
    if channels != 3 {
        return Err(Error::invalid(format!("pixmap needs 3 channels, got {channels}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("cannot render an empty map"));
    }
    let mut bytes = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    bytes.reserve(rows * cols * 3);
    for i in 0..rows {
        for j in 0..cols {
            for k in 0..3 {
                bytes.push(rgb[[i, j, k]]);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Hue assigned to each state: five spokes evenly spaced around the wheel.
pub fn state_hue_degrees(state: StateCode) -> f64 {
    state.index() as f64 * 360.0 / STATE_COUNT as f64
}

/// Fully saturated legend color of one state.
pub fn state_color(state: StateCode) -> [u8; 3] {
    hsv_to_rgb(state_hue_degrees(state), 1.0, 1.0)
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to_byte = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Renders a (rows, cols, STATE_COUNT) prediction map as colors: each state
/// contributes its hue weighted by the predicted probability, averaged on the
/// color wheel. The resultant length drives saturation, so confident pixels
/// are vivid and hedged pixels fade to white.
pub fn state_map_rgb(predictions: &Array3<f64>) -> Array3<u8> {
    let (rows, cols, depth) = predictions.dim();
    assert_eq!(depth, STATE_COUNT, "prediction map depth");
    let spokes: Vec<(f64, f64)> = (0..STATE_COUNT)
        .map(|k| {
            let theta = (k as f64 * 360.0 / STATE_COUNT as f64).to_radians();
            (theta.cos(), theta.sin())
        })
        .collect();
    let mut rgb = Array3::zeros((rows, cols, 3));
    for i in 0..rows {
        for j in 0..cols {
            let mut x = 0.0;
            let mut y = 0.0;
            let mut mass = 0.0;
            for k in 0..STATE_COUNT {
                let p = predictions[[i, j, k]].max(0.0);
                x += p * spokes[k].0;
                y += p * spokes[k].1;
                mass += p;
            }
            let (hue, sat) = if mass > 0.0 {
                let r = (x * x + y * y).sqrt() / mass;
                (y.atan2(x).to_degrees(), r.clamp(0.0, 1.0))
            } else {
                (0.0, 0.0)
            };
            let color = hsv_to_rgb(hue, sat, 1.0);
            for k in 0..3 {
                rgb[[i, j, k]] = color[k];
            }
        }
    }
    rgb
}

/// Quality verdicts as a fixed three-color map (green / amber / vermillion).
pub fn quality_map_rgb(quality: &Array2<QualityClass>) -> Array3<u8> {
    let (rows, cols) = quality.dim();
    let mut rgb = Array3::zeros((rows, cols, 3));
    for i in 0..rows {
        for j in 0..cols {
            let color = match quality[[i, j]] {
                QualityClass::High => [0u8, 158, 115],
                QualityClass::Moderate => [230, 159, 0],
                QualityClass::Low => [213, 94, 0],
            };
            for k in 0..3 {
                rgb[[i, j, k]] = color[k];
            }
        }
    }
    rgb
}

/// Sidecar describing a raw tensor payload, stored as `<payload>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

const TENSOR_FORMAT: &str = "qdtune-tensor-v1";

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Writes `values` as little-endian f32 in row-major order, in the same
/// binary convention dataset records use, plus a JSON manifest with the shape
/// and payload checksum.
pub fn write_tensor(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::ShapeMismatch(format!(
            "tensor shape {shape:?} holds {expected} values, got {}",
            values.len()
        )));
    }
    let mut payload = Vec::with_capacity(values.len() * 4);
    for &v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = TensorManifest {
        format: TENSOR_FORMAT.to_string(),
        dtype: "f32-le".to_string(),
        shape: shape.to_vec(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    fs::write(path, payload)?;
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`], verifying the checksum.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let manifest: TensorManifest =
        serde_json::from_slice(&fs::read(manifest_path(path))?).map_err(|e| {
            Error::CorruptManifest { path: manifest_path(path).display().to_string(), reason: e.to_string() }
        })?;
    if manifest.format != TENSOR_FORMAT || manifest.dtype != "f32-le" {
        return Err(Error::CorruptManifest {
            path: manifest_path(path).display().to_string(),
            reason: format!("unsupported format {} / dtype {}", manifest.format, manifest.dtype),
        });
    }
    let payload = fs::read(path)?;
    let actual = hex(&Sha256::digest(&payload));
    if actual != manifest.sha256 {
        return Err(Error::ChecksumMismatch { expected: manifest.sha256, actual });
    }
    let expected: usize = manifest.shape.iter().product();
    if payload.len() != expected * 4 {
        return Err(Error::CorruptManifest {
            path: path.display().to_string(),
            reason: format!("payload holds {} bytes, shape wants {}", payload.len(), expected * 4),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest.shape, values))
}

/// Minimal SVG box plot: one box-and-whiskers per labeled group. Degenerate
/// statistics (all quartiles equal) collapse to a median line.
pub fn boxplot_svg(title: &str, value_label: &str, groups: &[(String, BoxStats)]) -> String {
    assert!(!groups.is_empty(), "box plot needs at least one group");
    let slot = 90.0;
    let left = 70.0;
    let top = 40.0;
    let plot_h = 260.0;
    let width = left + slot * groups.len() as f64 + 30.0;
    let height = top + plot_h + 60.0;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, b) in groups {
        lo = lo.min(b.whisker_lo).min(b.min);
        hi = hi.max(b.whisker_hi).max(b.max);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        width / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\">{value_label}</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));
    for tick in 0..=4 {
        let v = lo + (hi - lo) * tick as f64 / 4.0;
        let ty = y(v);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{ty:.1}\" x2=\"{:.1}\" y2=\"{ty:.1}\" stroke=\"#ddd\"/>\n",
            width - 20.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            left - 6.0,
            ty + 4.0
        ));
    }
    for (g, (label, b)) in groups.iter().enumerate() {
        let cx = left + slot * (g as f64 + 0.5);
        let half = 22.0;
        // whiskers and caps
        for (a, z) in [(b.whisker_lo, b.q1), (b.q3, b.whisker_hi)] {
            svg.push_str(&format!(
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                y(a),
                y(z)
            ));
        }
        for w in [b.whisker_lo, b.whisker_hi] {
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                cx - half / 2.0,
                y(w),
                cx + half / 2.0,
                y(w)
            ));
        }
        // box and median
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"#333\"/>\n",
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.0)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#000\" stroke-width=\"2\"/>\n",
            cx - half,
            y(b.median),
            cx + half,
            y(b.median)
        ));
        svg.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
            top + plot_h + 24.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::box_stats;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn graymap_normalizes_and_survives_constants() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scan.pgm");
        let map = array![[0.0, 1.0], [2.0, 4.0]];
        write_pgm(&path, &map).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 64, 128, 255]);

        let flat = Array2::from_elem((2, 3), 7.0);
        write_pgm(&path, &flat).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.ends_with(&[128, 128, 128, 128, 128, 128]));
    }

    #[test]
    fn pixmap_writes_rgb_triplets_in_row_major_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        let mut rgb = Array3::zeros((1, 2, 3));
        rgb[[0, 0, 0]] = 255u8;
        rgb[[0, 1, 2]] = 9u8;
        write_ppm(&path, &rgb).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 0, 0, 0, 0, 9]);

        let bad = Array3::<u8>::zeros((1, 1, 4));
        assert!(write_ppm(&path, &bad).is_err());
    }

    #[test]
    fn hsv_conversion_hits_the_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(0.0, 0.0, 1.0), [255, 255, 255]);
    }

    #[test]
    fn pure_predictions_render_as_legend_colors_and_mixtures_fade() {
        let mut preds = Array3::zeros((1, 3, STATE_COUNT));
        preds[[0, 0, StateCode::LeftDot.index()]] = 1.0;
        for k in 0..STATE_COUNT {
            preds[[0, 1, k]] = 0.2;
        }
        preds[[0, 2, StateCode::DoubleDot.index()]] = 0.5;
        preds[[0, 2, StateCode::CentralDot.index()]] = 0.5;
        let rgb = state_map_rgb(&preds);

        let legend = state_color(StateCode::LeftDot);
        assert_eq!([rgb[[0, 0, 0]], rgb[[0, 0, 1]], rgb[[0, 0, 2]]], legend);
        // a uniform mixture has zero resultant, so the pixel is white
        assert_eq!([rgb[[0, 1, 0]], rgb[[0, 1, 1]], rgb[[0, 1, 2]]], [255, 255, 255]);
        // an even two-state split is less saturated than either pure state
        let mixed = [rgb[[0, 2, 0]], rgb[[0, 2, 1]], rgb[[0, 2, 2]]];
        assert!(mixed.iter().any(|&c| c > 0), "still carries hue");
        assert_ne!(mixed, state_color(StateCode::DoubleDot));
        assert_ne!(mixed, state_color(StateCode::CentralDot));
    }

    #[test]
    fn quality_palette_is_stable() {
        let quality = array![
            [QualityClass::High, QualityClass::Moderate],
            [QualityClass::Low, QualityClass::High]
        ];
        let rgb = quality_map_rgb(&quality);
        assert_eq!([rgb[[0, 0, 0]], rgb[[0, 0, 1]], rgb[[0, 0, 2]]], [0, 158, 115]);
        assert_eq!([rgb[[0, 1, 0]], rgb[[0, 1, 1]], rgb[[0, 1, 2]]], [230, 159, 0]);
        assert_eq!([rgb[[1, 0, 0]], rgb[[1, 0, 1]], rgb[[1, 0, 2]]], [213, 94, 0]);
    }

    #[test]
    fn tensors_round_trip_and_detect_tampering() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("preds.f32");
        let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        write_tensor(&path, &[2, 3, 4], &values).unwrap();
        let (shape, back) = read_tensor(&path).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, values);

        assert!(write_tensor(&path, &[5, 5], &values).is_err());

        let mut payload = fs::read(&path).unwrap();
        payload[3] ^= 0x40;
        fs::write(&path, payload).unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn boxplot_renders_groups_and_degenerate_stats() {
        let groups = vec![
            ("A".to_string(), box_stats(&[0.1, 0.2, 0.3, 0.4, 0.9])),
            ("G".to_string(), box_stats(&[0.5])),
        ];
        let svg = boxplot_svg("accuracy by condition", "accuracy", &groups);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">A</text>") && svg.contains(">G</text>"));
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("accuracy by condition"));
    }
}

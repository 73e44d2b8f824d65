//! Heatmap overlays of a change map on the follow-up volume.
//!
//! Growth is drawn in red and reduction in blue over the grayscale follow-up
//! slice. Changes with magnitude below the threshold stay transparent.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pairgan_core::Volume;
use serde::{Deserialize, Serialize};

use crate::error::{io, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    /// `|map|` below this is not drawn.
    pub threshold: f64,
    /// `|map|` at which the colour is fully opaque.
    pub full_scale: f64,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self { threshold: 0.15, full_scale: 0.5 }
    }
}

const GROWTH: [f64; 3] = [220.0, 20.0, 20.0];
const REDUCTION: [f64; 3] = [20.0, 60.0, 230.0];

pub fn overlay_name(z: usize) -> String {
    format!("overlay_z{z:04}.png")
}

/// RGB pixels of slice `z`, row-major.
pub fn render_slice(map: &Volume, t2: &Volume, z: usize, style: &OverlayStyle) -> Result<Vec<[u8; 3]>, TrainError> {
    if map.shape() != t2.shape() {
        return Err(TrainError::Grid(format!("map grid {} differs from t2 grid {}", map.shape(), t2.shape())));
    }
    let nz = t2.shape().nz();
    if z >= nz {
        return Err(TrainError::Grid(format!("slice {z} is out of range for {nz} slices")));
    }
    let (lo, hi) = t2.min_max();
    let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let pixels = map
        .slice_z(z)
        .iter()
        .zip(t2.slice_z(z))
        .map(|(&m, &v)| {
            let gray = (((v - lo) as f64 / span).clamp(0.0, 1.0) * 255.0).round();
            let m = m as f64;
            if m.abs() < style.threshold || m == 0.0 {
                return [gray as u8; 3];
            }
            let alpha = (m.abs() / style.full_scale).clamp(0.0, 1.0);
            let colour = if m > 0.0 { GROWTH } else { REDUCTION };
            colour.map(|c| ((1.0 - alpha) * gray + alpha * c).round() as u8)
        })
        .collect();
    Ok(pixels)
}

/// Write one PNG per requested slice into `out_dir`.
pub fn render_overlays(
    map: &Volume,
    t2: &Volume,
    out_dir: &Path,
    slices: &[usize],
    style: &OverlayStyle,
) -> Result<Vec<PathBuf>, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let s = t2.shape();
    let mut written = Vec::with_capacity(slices.len());
    for &z in slices {
        let pixels = render_slice(map, t2, z, style)?;
        let path = out_dir.join(overlay_name(z));
        let file = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), s.nx() as u32, s.ny() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let as_io = |e: png::EncodingError| io(&path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(as_io)?;
        writer.write_image_data(pixels.as_flattened()).map_err(as_io)?;
        writer.finish().map_err(as_io)?;
        written.push(path);
    }
    Ok(written)
}

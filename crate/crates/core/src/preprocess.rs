//! Resampling, histogram matching, min-max normalisation and centering.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::volume::{Mask, Shape, Volume};

/// Interior foreground quantiles used as knots of the intensity transfer.
/// Few knots keep the transfer smooth: a dense quantile match would copy the
/// tail shape, and with it any change in the size of bright structures, from
/// one volume onto the other.
pub const MATCH_POINTS: usize = 10;

/// Source coordinate of output index `i` when mapping `n_out` samples onto `n_in`
/// with the first and last samples aligned.
fn aligned_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Trilinear resampling onto `target`, end samples aligned. Spacing is
/// rescaled so the distance between the first and last voxel centres is kept.
pub fn resample(v: &Volume, target: Shape) -> Result<Volume, CoreError> {
    if target.0.contains(&0) {
        return Err(CoreError::Invalid(format!("target shape {target} has a zero extent")));
    }
    let src = v.shape();
    if src == target {
        return Ok(v.clone());
    }
    // per-axis (lower index, weight of upper index) tables
    let table = |a: usize| -> Vec<(usize, f64)> {
        (0..target.0[a])
            .map(|i| {
                let c = aligned_coord(i, src.0[a], target.0[a]);
                let lo = (c.floor() as usize).min(src.0[a] - 1);
                (lo, c - lo as f64)
            })
            .collect()
    };
    let (tx, ty, tz) = (table(0), table(1), table(2));
    let clamp = |i: usize, a: usize| (i + 1).min(src.0[a] - 1);
    let mut out = Vec::with_capacity(target.len());
    for &(z0, wz) in &tz {
        let z1 = clamp(z0, 2);
        for &(y0, wy) in &ty {
            let y1 = clamp(y0, 1);
            for &(x0, wx) in &tx {
                let x1 = clamp(x0, 0);
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let g = |x, y, z| v.get(x, y, z) as f64;
                let c00 = lerp(g(x0, y0, z0), g(x1, y0, z0), wx);
                let c10 = lerp(g(x0, y1, z0), g(x1, y1, z0), wx);
                let c01 = lerp(g(x0, y0, z1), g(x1, y0, z1), wx);
                let c11 = lerp(g(x0, y1, z1), g(x1, y1, z1), wx);
                let c0 = lerp(c00, c10, wy);
                let c1 = lerp(c01, c11, wy);
                out.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        let (n, m) = (src.0[a], target.0[a]);
        if n > 1 && m > 1 {
            v.spacing[a] * (n - 1) as f64 / (m - 1) as f64
        } else {
            v.spacing[a] * n as f64 / m as f64
        }
    });
    Volume::new(target, spacing, v.origin, out)
}

/// Nearest-neighbour resampling of a mask on the same aligned lattice as [`resample`].
pub fn resample_mask(m: &Mask, target: Shape) -> Mask {
    let src = m.shape();
    if src == target {
        return m.clone();
    }
    let idx = |a: usize| -> Vec<usize> {
        (0..target.0[a]).map(|i| (aligned_coord(i, src.0[a], target.0[a]).round() as usize).min(src.0[a] - 1)).collect()
    };
    let (ix, iy, iz) = (idx(0), idx(1), idx(2));
    Mask::from_fn(target, |x, y, z| m.get(ix[x], iy[y], iz[z]))
}

/// Result of [`histogram_match`].
#[derive(Debug, Clone)]
pub struct Matched {
    pub volume: Volume,
    /// Set when matching was skipped (constant moving volume).
    pub warning: Option<String>,
}

/// Quantile of sorted data at probability `p`, linear between order statistics.
fn quantile_sorted(sorted: &[f32], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Sorted intensities strictly above the volume mean.
fn foreground_sorted(v: &Volume) -> Vec<f32> {
    let mean = v.mean();
    let mut fg: Vec<f32> = v.data().iter().copied().filter(|&x| x as f64 > mean).collect();
    fg.sort_by(f32::total_cmp);
    fg
}

/// Knots `(source, reference)` of the transfer: the global minima, the
/// foreground minima, [`MATCH_POINTS`] foreground quantiles at
/// `k / (MATCH_POINTS + 1)`, and the maxima.
pub fn match_knots(moving: &Volume, reference: &Volume) -> Vec<(f64, f64)> {
    let (fs, fr) = (foreground_sorted(moving), foreground_sorted(reference));
    let mut knots = Vec::with_capacity(MATCH_POINTS + 3);
    knots.push((moving.min_max().0 as f64, reference.min_max().0 as f64));
    for k in 0..=MATCH_POINTS + 1 {
        let p = k as f64 / (MATCH_POINTS + 1) as f64;
        knots.push((quantile_sorted(&fs, p), quantile_sorted(&fr, p)));
    }
    knots
}

/// Piecewise-linear transfer through `knots` (non-decreasing in both
/// coordinates). Where several knots share a source value the last one wins;
/// values outside the knot range are clamped to the end values.
pub fn apply_transfer(knots: &[(f64, f64)], x: f64) -> f64 {
    let first = knots[0];
    if x < first.0 {
        return first.1;
    }
    // index of the first knot with source value > x
    let j = knots.partition_point(|k| k.0 <= x);
    if j == knots.len() {
        return knots[j - 1].1;
    }
    let (a, b) = (knots[j - 1], knots[j]);
    if x == a.0 {
        return a.1;
    }
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

/// Map `moving`'s intensities so its foreground quantiles follow `reference`'s.
pub fn histogram_match(moving: &Volume, reference: &Volume) -> Matched {
    let (lo, hi) = moving.min_max();
    if lo == hi {
        return Matched {
            volume: moving.clone(),
            warning: Some(format!("moving volume is constant ({lo}); histogram matching skipped")),
        };
    }
    let knots = match_knots(moving, reference);
    let data = moving.data().iter().map(|&x| apply_transfer(&knots, x as f64) as f32).collect();
    Matched { volume: moving.with_data(data), warning: None }
}

/// Affine rescale to `[0, 1]`; a constant volume becomes all zeros.
pub fn normalize_unit(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    if lo == hi {
        return v.with_data(vec![0.0; v.data().len()]);
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    v.with_data(v.data().iter().map(|&x| ((x as f64 - lo) / range) as f32).collect())
}

/// Integer translation `out[p + shift] = v[p]`, zero-filled.
pub fn shift_volume(v: &Volume, shift: [i64; 3]) -> Volume {
    let s = v.shape();
    let mut out = vec![0.0f32; s.len()];
    translate(s, shift, |src, dst| out[dst] = v.data()[src]);
    v.with_data(out)
}

pub fn shift_mask(m: &Mask, shift: [i64; 3]) -> Mask {
    let s = m.shape();
    let mut out = vec![false; s.len()];
    translate(s, shift, |src, dst| out[dst] = m.data()[src]);
    Mask::new(s, out).expect("same shape")
}

fn translate(s: Shape, shift: [i64; 3], mut copy: impl FnMut(usize, usize)) {
    let range = |a: usize| {
        let n = s.0[a] as i64;
        let lo = (-shift[a]).clamp(0, n);
        let hi = (n - shift[a]).clamp(0, n);
        lo..hi.max(lo)
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    for z in rz {
        let dz = (z + shift[2]) as usize;
        for y in ry.clone() {
            let dy = (y + shift[1]) as usize;
            for x in rx.clone() {
                let dx = (x + shift[0]) as usize;
                copy(s.index(x as usize, y as usize, z as usize), s.index(dx, dy, dz));
            }
        }
    }
}

/// Shift that moves the rounded mask centroid to the grid centre `n / 2`.
pub fn centering_shift(mask: &Mask) -> Result<[i64; 3], CoreError> {
    let c = mask.centroid().ok_or_else(|| CoreError::Invalid("brain mask is empty".into()))?;
    let s = mask.shape();
    Ok(std::array::from_fn(|a| (s.0[a] / 2) as i64 - c[a].round() as i64))
}

/// Translate `v` so the brain mask centroid sits at the grid centre.
pub fn center_brain(v: &Volume, mask: &Mask) -> Result<(Volume, [i64; 3]), CoreError> {
    if mask.shape() != v.shape() {
        return Err(CoreError::Invalid(format!("mask grid {} differs from volume grid {}", mask.shape(), v.shape())));
    }
    let shift = centering_shift(mask)?;
    Ok((shift_volume(v, shift), shift))
}

/// Which volume of the pair is matched onto the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDirection {
    /// Match t2 onto t1.
    #[default]
    T2ToT1,
    T1ToT2,
}

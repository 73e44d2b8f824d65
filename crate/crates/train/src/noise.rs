//! The smoothed-noise square added to training views while a noise phase is
//! active, and the in-plane footprint later excluded at inference.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::TrainError;

/// Which view receives the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    T1,
    #[default]
    T2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Width of the Gaussian filter applied to the unit noise, in pixels.
    pub sigma_px: f64,
    /// Standard deviation of the patch after smoothing.
    pub std: f64,
    pub target: NoiseTarget,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma_px: 2.0, std: 0.2, target: NoiseTarget::T2 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite() && self.std >= 0.0 && self.std.is_finite()) {
            return Err(TrainError::Config(format!(
                "noise sigma_px and std must be finite and non-negative, got ({}, {})",
                self.sigma_px, self.std
            )));
        }
        Ok(())
    }
}

/// Square region of a slice, rows `y0..y0+size`, columns `x0..x0+size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

impl Footprint {
    /// Square of side `size` centred at fractional position `(cx, cy)` of a
    /// `height x width` slice.
    pub fn centred(center: (f64, f64), size: usize, height: usize, width: usize) -> Result<Self, TrainError> {
        let start = |c: f64, n: usize| (c * n as f64 - size as f64 / 2.0).round();
        let (x0, y0) = (start(center.0, width), start(center.1, height));
        if x0 < 0.0 || y0 < 0.0 || x0 as usize + size > width || y0 as usize + size > height {
            return Err(TrainError::Config(format!(
                "noise square of {size} px at {center:?} does not fit a {height}x{width} slice"
            )));
        }
        Ok(Self { x0: x0 as usize, y0: y0 as usize, size })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x0 + self.size).contains(&x) && (self.y0..self.y0 + self.size).contains(&y)
    }

    pub fn area(&self) -> usize {
        self.size * self.size
    }

    /// Row-major `height x width` membership mask.
    pub fn plane_mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|i| self.contains(i % width, i / width)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSquare {
    pub center: (f64, f64),
    pub size_px: usize,
    /// Row-major `size_px x size_px` patch.
    pub field: Vec<f32>,
    pub active: bool,
}

impl NoiseSquare {
    pub fn inactive() -> Self {
        Self { center: (0.5, 0.5), size_px: 0, field: Vec::new(), active: false }
    }

    /// Unit Gaussian noise smoothed with a Gaussian of `sigma_px`, rescaled to
    /// standard deviation `std`. The noise is drawn on a margin wide enough
    /// that the filter never sees a border.
    pub fn sample<R: Rng + ?Sized>(center: (f64, f64), size_px: usize, cfg: &NoiseConfig, rng: &mut R) -> Self {
        let r = (3.0 * cfg.sigma_px).ceil() as usize;
        let n = size_px + 2 * r;
        let raw: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let kernel: Vec<f64> = if cfg.sigma_px > 0.0 {
            let k: Vec<f64> =
                (0..=2 * r).map(|i| (-((i as f64 - r as f64).powi(2)) / (2.0 * cfg.sigma_px.powi(2))).exp()).collect();
            let s: f64 = k.iter().sum();
            k.into_iter().map(|v| v / s).collect()
        } else {
            vec![1.0]
        };
        // rows first (n rows x size_px columns), then columns
        let mut rows = vec![0.0; n * size_px];
        for y in 0..n {
            for x in 0..size_px {
                rows[y * size_px + x] = kernel.iter().enumerate().map(|(k, w)| w * raw[y * n + x + k]).sum();
            }
        }
        let mut field = vec![0.0; size_px * size_px];
        for y in 0..size_px {
            for x in 0..size_px {
                field[y * size_px + x] = kernel.iter().enumerate().map(|(k, w)| w * rows[(y + k) * size_px + x]).sum();
            }
        }
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
        let scale = if sd > 0.0 { cfg.std / sd } else { 0.0 };
        Self { center, size_px, field: field.iter().map(|v| (v * scale) as f32).collect(), active: true }
    }

    pub fn footprint(&self, height: usize, width: usize) -> Result<Footprint, TrainError> {
        Footprint::centred(self.center, self.size_px, height, width)
    }
}

/// Add the patch to a row-major `height x width` slice. Pixels outside the
/// footprint are untouched; an inactive square is the identity.
pub fn apply_noise_square(slice: &mut [f32], height: usize, width: usize, ns: &NoiseSquare) -> Result<(), TrainError> {
    assert_eq!(slice.len(), height * width, "slice length does not match {height}x{width}");
    if !ns.active {
        return Ok(());
    }
    let fp = ns.footprint(height, width)?;
    for dy in 0..fp.size {
        let row = &mut slice[(fp.y0 + dy) * width + fp.x0..][..fp.size];
        for (v, p) in row.iter_mut().zip(&ns.field[dy * fp.size..(dy + 1) * fp.size]) {
            *v += p;
        }
    }
    Ok(())
}

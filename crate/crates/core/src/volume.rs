//! Scalar 3D grids and binary masks.
//!
//! Voxels are stored x-fastest: index `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Shape([nx, ny, nz])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.0;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    /// Number of voxels in one z slice.
    pub fn slice_len(&self) -> usize {
        self.0[0] * self.0[1]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    shape: Shape,
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// Position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape, spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self, CoreError> {
        if shape.0.contains(&0) {
            return Err(CoreError::Invalid(format!("shape {shape} has a zero extent")));
        }
        if data.len() != shape.len() {
            return Err(CoreError::Invalid(format!(
                "shape {shape} needs {} voxels, got {}",
                shape.len(),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(CoreError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self { shape, spacing, origin, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Self { shape, spacing: [1.0; 3], origin: [0.0; 3], data: vec![value; shape.len()] }
    }

    /// Build a volume by evaluating `f(x, y, z)` at every voxel, unit spacing.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz() {
            for y in 0..shape.ny() {
                for x in 0..shape.nx() {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, spacing: [1.0; 3], origin: [0.0; 3], data }
    }

    /// Same geometry, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), self.data.len(), "voxel count mismatch");
        Self { shape: self.shape, spacing: self.spacing, origin: self.origin, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.shape.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.shape.index(x, y, z);
        self.data[i] = v;
    }

    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.shape.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_z_mut(&mut self, z: usize) -> &mut [f32] {
        let n = self.shape.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.shape == other.shape
    }

    /// Trilinear sample at continuous voxel coordinates; zero outside the grid.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.shape.0;
        let fx = p[0].floor();
        let fy = p[1].floor();
        let fz = p[2].floor();
        let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
        let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
            let z = z0 + dz;
            if wz == 0.0 || z < 0 || z >= nz as i64 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                let y = y0 + dy;
                if wy == 0.0 || y < 0 || y >= ny as i64 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let x = x0 + dx;
                    if wx == 0.0 || x < 0 || x >= nx as i64 {
                        continue;
                    }
                    acc += wx * wy * wz * self.get(x as usize, y as usize, z as usize) as f64;
                }
            }
        }
        acc
    }
}

/// Binary voxel mask. Brain masks and segmentations share this type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    shape: Shape,
    data: Vec<bool>,
}

pub type BrainMask = Mask;
pub type SegmentationMask = Mask;

impl Mask {
    pub fn new(shape: Shape, data: Vec<bool>) -> Result<Self, CoreError> {
        if data.len() != shape.len() {
            return Err(CoreError::Invalid(format!("mask of shape {shape} needs {} voxels, got {}", shape.len(), data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Shape) -> Self {
        Self { shape, data: vec![false; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for z in 0..shape.nz() {
            for y in 0..shape.ny() {
                for x in 0..shape.nx() {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    /// Voxels strictly above 0.5 are foreground.
    pub fn from_volume(v: &Volume) -> Self {
        Self { shape: v.shape(), data: v.data().iter().map(|&x| x > 0.5).collect() }
    }

    /// 0/1 intensities on the given volume's geometry.
    pub fn to_volume(&self, like: &Volume) -> Volume {
        assert_eq!(self.shape, like.shape(), "mask and volume grids differ");
        like.with_data(self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.shape.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Mean foreground coordinate, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                let c = self.shape.coords(i);
                for a in 0..3 {
                    sum[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

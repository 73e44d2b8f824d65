//! Random rigid 3D augmentation with additive Gaussian noise.
//!
//! A draw rotates the volume about its grid centre, translates it by a
//! continuous shift and adds zero-mean Gaussian noise. Noise for z slice `k`
//! comes from its own ChaCha stream, so a single slice of the augmented
//! volume can be produced without building the rest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::volume::{Shape, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Angles are drawn from `[-r, r]` degrees about each axis.
    pub rotation_range_deg: f64,
    /// Shifts are drawn from `[-s, s]` voxels along each axis.
    pub shift_range_vox: f64,
    /// Noise variance is drawn from `[0, v]`.
    pub noise_variance_max: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { rotation_range_deg: 15.0, shift_range_vox: 10.0, noise_variance_max: 0.1, seed: 0 }
    }
}

impl AugmentSpec {
    /// No rotation, shift or noise.
    pub fn identity() -> Self {
        Self { rotation_range_deg: 0.0, shift_range_vox: 0.0, noise_variance_max: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bounds = [
            ("rotation_range_deg", self.rotation_range_deg),
            ("shift_range_vox", self.shift_range_vox),
            ("noise_variance_max", self.noise_variance_max),
        ];
        for (name, v) in bounds {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CoreError::Invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.noise_variance_max > 1.0 {
            return Err(CoreError::Invalid(format!("noise_variance_max must be at most 1, got {}", self.noise_variance_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub angles_deg: [f64; 3],
    pub shifts_vox: [f64; 3],
    pub noise_variance: f64,
    pub noise_seed: u64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self { angles_deg: [0.0; 3], shifts_vox: [0.0; 3], noise_variance: 0.0, noise_seed: 0 }
    }

    /// Inverse of the spatial part: maps an output voxel back to where it is
    /// read from in the input.
    pub(crate) fn pullback(&self, shape: Shape) -> Pullback {
        let c = shape.0.map(|n| (n as f64 - 1.0) / 2.0);
        let rotates = self.angles_deg.iter().any(|&a| a != 0.0);
        let r = rotation_matrix(self.angles_deg);
        // R^{-1} = R^T
        let rt = std::array::from_fn(|i| std::array::from_fn(|j| r[j][i]));
        Pullback { centre: c, shift: self.shifts_vox, rotation: rotates.then_some(rt) }
    }
}

/// `Rz * Ry * Rx` for angles in degrees about x, y, z.
pub fn rotation_matrix(angles_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [ax, ay, az] = angles_deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(rz, matmul3(ry, rx))
}

fn matmul3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub(crate) struct Pullback {
    centre: [f64; 3],
    shift: [f64; 3],
    rotation: Option<[[f64; 3]; 3]>,
}

impl Pullback {
    #[inline]
    pub(crate) fn source(&self, p: [f64; 3]) -> [f64; 3] {
        match &self.rotation {
            None => std::array::from_fn(|a| p[a] - self.shift[a]),
            Some(rt) => {
                let d: [f64; 3] = std::array::from_fn(|a| p[a] - self.shift[a] - self.centre[a]);
                std::array::from_fn(|i| rt[i][0] * d[0] + rt[i][1] * d[1] + rt[i][2] * d[2] + self.centre[i])
            }
        }
    }
}

/// Draw one augmentation. Angles and shifts are uniform on their symmetric
/// ranges, the noise variance uniform on `[0, max]`.
pub fn draw<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> AugmentDraw {
    let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let angles_deg = [0; 3].map(|_| sym(rng, spec.rotation_range_deg));
    let shifts_vox = [0; 3].map(|_| sym(rng, spec.shift_range_vox));
    let noise_variance = if spec.noise_variance_max > 0.0 { rng.random_range(0.0..=spec.noise_variance_max) } else { 0.0 };
    AugmentDraw { angles_deg, shifts_vox, noise_variance, noise_seed: rng.random() }
}

fn slice_noise(d: &AugmentDraw, z: usize, out: &mut [f32]) {
    if d.noise_variance <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, d.noise_variance.sqrt()).expect("finite variance");
    let mut rng = ChaCha8Rng::seed_from_u64(d.noise_seed);
    rng.set_stream(z as u64);
    for v in out.iter_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
}

/// Slice `z` of `apply(v, d)`, row-major `(y, x)`.
pub fn apply_slice(v: &Volume, d: &AugmentDraw, z: usize) -> Vec<f32> {
    let s = v.shape();
    assert!(z < s.nz(), "slice {z} out of range for {s}");
    let pb = d.pullback(s);
    let mut out = Vec::with_capacity(s.slice_len());
    for y in 0..s.ny() {
        for x in 0..s.nx() {
            let q = pb.source([x as f64, y as f64, z as f64]);
            out.push(v.sample_trilinear(q) as f32);
        }
    }
    slice_noise(d, z, &mut out);
    out
}

/// Rotate about the grid centre, shift, then add noise.
pub fn apply(v: &Volume, d: &AugmentDraw) -> Volume {
    let s = v.shape();
    if d.angles_deg == [0.0; 3] && d.shifts_vox == [0.0; 3] && d.noise_variance <= 0.0 {
        return v.clone();
    }
    let mut data = Vec::with_capacity(s.len());
    for z in 0..s.nz() {
        data.extend(apply_slice(v, d, z));
    }
    v.with_data(data)
}

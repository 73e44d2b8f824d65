//! Synthetic longitudinal pairs with known tumor change.
//!
//! A textured brain ellipsoid carries a bright tumor ellipsoid whose radii
//! differ between the two timepoints. The second timepoint is additionally
//! misaligned by a small rigid transform and scaled by an intensity drift.
//! Ground-truth masks are exact voxel membership tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{classify_rano, RanoCategory};
use crate::augment::AugmentDraw;
use crate::error::CoreError;
use crate::io::{write_mask, write_volume};
use crate::volume::{Mask, Shape, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub spacing: [f64; 3],
    pub brain_semi_axes: [f64; 3],
    /// Correlation length of the background texture, in voxels.
    pub texture_scale: f64,
    /// Standard deviation of the background texture.
    pub texture_amplitude: f64,
    /// Mean background intensity inside the brain.
    pub background: f64,
    pub tumor_center: [f64; 3],
    pub tumor_radii_t1: [f64; 3],
    pub tumor_radii_t2: [f64; 3],
    pub tumor_intensity: f64,
    /// Rigid misalignment of the second timepoint.
    pub rotation_deg: [f64; 3],
    pub shift_vox: [f64; 3],
    /// Multiplicative intensity change of the second timepoint.
    pub drift: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: Shape::new(64, 64, 32),
            spacing: [1.0; 3],
            brain_semi_axes: [26.0, 28.0, 13.0],
            texture_scale: 6.0,
            texture_amplitude: 0.08,
            background: 0.4,
            tumor_center: [36.0, 30.0, 16.0],
            tumor_radii_t1: [5.0; 3],
            tumor_radii_t2: [8.0; 3],
            tumor_intensity: 0.9,
            rotation_deg: [0.0; 3],
            shift_vox: [0.0; 3],
            drift: 1.0,
            seed: 0,
        }
    }
}

/// Largest misalignment a spec may request.
pub const MAX_ROTATION_DEG: f64 = 5.0;
pub const MAX_SHIFT_VOX: f64 = 4.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.shape.0.contains(&0) {
            return bad(format!("phantom shape {} has a zero extent", self.shape));
        }
        let positive = |a: &[f64; 3]| a.iter().all(|&r| r > 0.0 && r.is_finite());
        if !positive(&self.tumor_radii_t1) || !positive(&self.tumor_radii_t2) || !positive(&self.brain_semi_axes) {
            return bad("radii and semi-axes must be positive".into());
        }
        if self.rotation_deg.iter().any(|a| a.abs() > MAX_ROTATION_DEG) {
            return bad(format!("rotation {:?} exceeds {MAX_ROTATION_DEG} degrees", self.rotation_deg));
        }
        if self.shift_vox.iter().any(|s| s.abs() > MAX_SHIFT_VOX) {
            return bad(format!("shift {:?} exceeds {MAX_SHIFT_VOX} voxels", self.shift_vox));
        }
        if !(self.drift > 0.0) || !(self.texture_scale > 0.0) || !(self.texture_amplitude >= 0.0) {
            return bad("drift and texture scale must be positive, amplitude non-negative".into());
        }
        Ok(())
    }

    fn brain_centre(&self) -> [f64; 3] {
        self.shape.0.map(|n| (n as f64 - 1.0) / 2.0)
    }

    fn in_brain(&self, p: [f64; 3]) -> bool {
        in_ellipsoid(p, self.brain_centre(), self.brain_semi_axes)
    }

    fn transform(&self) -> AugmentDraw {
        AugmentDraw { angles_deg: self.rotation_deg, shifts_vox: self.shift_vox, noise_variance: 0.0, noise_seed: 0 }
    }
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub v1: u64,
    pub v2: u64,
    /// `|seg2| - |seg1|` on the common grid.
    pub true_change: i64,
    pub category: RanoCategory,
    /// Tumor voxel count at t2 in its own frame, before the rigid mapping.
    pub v2_own_frame: u64,
    pub rotation_deg: [f64; 3],
    pub shift_vox: [f64; 3],
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub t1: Volume,
    pub t2: Volume,
    pub brain: Mask,
    pub brain_t2: Mask,
    pub seg1: Mask,
    pub seg2: Mask,
    pub truth: PhantomTruth,
}

/// Uniform noise smoothed by a separable Gaussian, standardised to zero mean
/// and unit variance.
fn texture_field(shape: Shape, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f: Vec<f64> = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    for axis in 0..3 {
        let n = shape.0[axis] as i64;
        let mut out = vec![0.0; f.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = shape.coords(i);
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                // mirror at the borders
                let mut j = c[axis] as i64 + k as i64 - radius;
                while j < 0 || j >= n {
                    j = if j < 0 { -j - 1 } else { 2 * n - j - 1 };
                }
                let mut cc = c;
                cc[axis] = j as usize;
                acc += w * f[shape.index(cc[0], cc[1], cc[2])];
            }
            *o = acc;
        }
        f = out;
    }
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

/// Intensity of one timepoint's scene at continuous position `p` in its own frame.
struct Scene<'a> {
    spec: &'a PhantomSpec,
    texture: Volume,
    radii: [f64; 3],
}

impl Scene<'_> {
    fn value(&self, p: [f64; 3]) -> f64 {
        let s = self.spec;
        if in_ellipsoid(p, s.tumor_center, self.radii) {
            return s.tumor_intensity;
        }
        if !s.in_brain(p) {
            return 0.0;
        }
        let bg = s.background + s.texture_amplitude * self.texture.sample_trilinear(p);
        bg.clamp(0.05, 0.8 * s.tumor_intensity)
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase, CoreError> {
    spec.validate()?;
    let shape = spec.shape;
    let texture = Volume::new(
        shape,
        [1.0; 3],
        [0.0; 3],
        texture_field(shape, spec.texture_scale / 2.0, spec.seed).into_iter().map(|v| v as f32).collect(),
    )?;
    let at = |x: usize, y: usize, z: usize| [x as f64, y as f64, z as f64];

    let brain = Mask::from_fn(shape, |x, y, z| spec.in_brain(at(x, y, z)));
    let seg1 = Mask::from_fn(shape, |x, y, z| in_ellipsoid(at(x, y, z), spec.tumor_center, spec.tumor_radii_t1));
    let seg2_own = Mask::from_fn(shape, |x, y, z| in_ellipsoid(at(x, y, z), spec.tumor_center, spec.tumor_radii_t2));
    for (name, seg) in [("t1", &seg1), ("t2", &seg2_own)] {
        if seg.is_empty() {
            return Err(CoreError::Invalid(format!("tumor at {name} covers no voxel")));
        }
        if seg.data().iter().zip(brain.data()).any(|(&t, &b)| t && !b) {
            return Err(CoreError::Invalid(format!("tumor at {name} escapes the brain")));
        }
    }

    let scene1 = Scene { spec, texture, radii: spec.tumor_radii_t1 };
    let t1 = Volume::from_fn(shape, |x, y, z| scene1.value(at(x, y, z)) as f32);
    let scene2 = Scene { radii: spec.tumor_radii_t2, ..scene1 };
    let pb = spec.transform().pullback(shape);
    let t2 = Volume::from_fn(shape, |x, y, z| (scene2.value(pb.source(at(x, y, z))) * spec.drift) as f32);
    // masks follow the same transform, nearest voxel of the own frame
    let nearest = |m: &Mask| {
        Mask::from_fn(shape, |x, y, z| {
            let q = pb.source(at(x, y, z)).map(f64::round);
            (0..3).all(|a| q[a] >= 0.0 && q[a] < shape.0[a] as f64) && m.get(q[0] as usize, q[1] as usize, q[2] as usize)
        })
    };
    let seg2 = nearest(&seg2_own);
    let brain_t2 = nearest(&brain);

    let with_geometry = |v: Volume| Volume::new(shape, spec.spacing, [0.0; 3], v.into_data());
    let (t1, t2) = (with_geometry(t1)?, with_geometry(t2)?);
    let (v1, v2) = (seg1.count() as u64, seg2.count() as u64);
    let category = classify_rano(v1, v2 as i64)?.category;
    let truth = PhantomTruth {
        v1,
        v2,
        true_change: v2 as i64 - v1 as i64,
        category,
        v2_own_frame: seg2_own.count() as u64,
        rotation_deg: spec.rotation_deg,
        shift_vox: spec.shift_vox,
        drift: spec.drift,
    };
    Ok(PhantomCase { spec: spec.clone(), t1, t2, brain, brain_t2, seg1, seg2, truth })
}

/// `n_per_class` cases of each RANO category with randomised geometry,
/// misalignment and drift around `base`.
pub fn generate_suite(n_per_class: usize, seed: u64, base: &PhantomSpec) -> Result<Vec<PhantomCase>, CoreError> {
    if n_per_class == 0 {
        return Err(CoreError::Invalid("need at least one case per category".into()));
    }
    let mut out = Vec::with_capacity(3 * n_per_class);
    for (ci, &category) in RanoCategory::ALL.iter().enumerate() {
        for k in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((ci * n_per_class + k) as u64);
            let case = (0..100)
                .map(|_| generate(&suite_spec(base, category, &mut rng)))
                .find(|c| c.as_ref().map_or(true, |c| c.truth.category == category))
                .ok_or_else(|| CoreError::Invalid(format!("could not draw a {category} case")))??;
            out.push(case);
        }
    }
    Ok(out)
}

fn suite_spec(base: &PhantomSpec, category: RanoCategory, rng: &mut ChaCha8Rng) -> PhantomSpec {
    let (r1, scale) = match category {
        RanoCategory::Response => (rng.random_range(7.0..8.0), rng.random_range(0.6..0.72)),
        RanoCategory::Stable => (rng.random_range(6.0..7.5), rng.random_range(0.96..1.04)),
        RanoCategory::Progression => (rng.random_range(5.0..6.0), rng.random_range(1.25..1.4)),
    };
    let aspect: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.92..1.08));
    let c = base.brain_centre();
    let offset = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)];
    PhantomSpec {
        tumor_center: std::array::from_fn(|a| c[a] + offset[a]),
        tumor_radii_t1: aspect.map(|s| r1 * s),
        tumor_radii_t2: aspect.map(|s| r1 * scale * s),
        rotation_deg: std::array::from_fn(|_| rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
        shift_vox: std::array::from_fn(|_| rng.random_range(-MAX_SHIFT_VOX..=MAX_SHIFT_VOX)),
        drift: rng.random_range(0.9..1.1),
        seed: rng.random(),
        ..base.clone()
    }
}

/// File names used by [`write_case`].
pub const CASE_FILES: [&str; 6] = ["t1", "t2", "brain", "brain_t2", "seg1", "seg2"];

/// Write the case volumes as `<name><ext>` plus `truth.json` into `dir`.
pub fn write_case(case: &PhantomCase, dir: &Path, ext: &str) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    write_volume(&case.t1, dir.join(format!("t1{ext}")))?;
    write_volume(&case.t2, dir.join(format!("t2{ext}")))?;
    write_mask(&case.brain, &case.t1, dir.join(format!("brain{ext}")))?;
    write_mask(&case.brain_t2, &case.t2, dir.join(format!("brain_t2{ext}")))?;
    write_mask(&case.seg1, &case.t1, dir.join(format!("seg1{ext}")))?;
    write_mask(&case.seg2, &case.t2, dir.join(format!("seg2{ext}")))?;
    let truth = serde_json::json!({ "truth": case.truth, "spec": case.spec });
    let path = dir.join("truth.json");
    std::fs::write(&path, serde_json::to_string_pretty(&truth).expect("truth serialises")).map_err(|e| CoreError::io(&path, e))
}

//! The image pair a run trains on and the per-step batch sampler.

use pairgan_core::augment::{apply_slice, draw, AugmentDraw, AugmentSpec};
use pairgan_core::Volume;
use pairgan_nets::{Real, SliceBatch};
use rand::Rng;

use crate::error::TrainError;
use crate::noise::{apply_noise_square, NoiseSquare, NoiseTarget};

/// A slice counts as containing brain when at least this fraction of its
/// pixels exceeds [`BRAIN_LEVEL`].
pub const BRAIN_FRACTION: f64 = 0.05;
pub const BRAIN_LEVEL: f32 = 0.02;

/// Preprocessed baseline and follow-up volumes on one grid.
#[derive(Debug, Clone)]
pub struct PairData {
    pub t1: Volume,
    pub t2: Volume,
    /// z indices slices are drawn from.
    pub slices: Vec<usize>,
}

impl PairData {
    pub fn new(t1: Volume, t2: Volume) -> Result<Self, TrainError> {
        if t1.shape() != t2.shape() {
            return Err(TrainError::Grid(format!("t1 grid {} differs from t2 grid {}", t1.shape(), t2.shape())));
        }
        if !(t1.is_finite() && t2.is_finite()) {
            return Err(TrainError::Grid("training volumes contain non-finite values".into()));
        }
        let slices = eligible_slices(&t1, &t2);
        Ok(Self { t1, t2, slices })
    }

    /// `(height, width)` of one slice.
    pub fn plane(&self) -> (usize, usize) {
        let s = self.t1.shape();
        (s.ny(), s.nx())
    }
}

fn has_brain(slice: &[f32]) -> bool {
    let n = slice.iter().filter(|&&v| v > BRAIN_LEVEL).count();
    n as f64 >= BRAIN_FRACTION * slice.len() as f64
}

/// Slices showing brain in both volumes; every slice if none qualifies.
pub fn eligible_slices(t1: &Volume, t2: &Volume) -> Vec<usize> {
    let nz = t1.shape().nz();
    let picked: Vec<usize> = (0..nz).filter(|&z| has_brain(t1.slice_z(z)) && has_brain(t2.slice_z(z))).collect();
    if picked.is_empty() {
        (0..nz).collect()
    } else {
        picked
    }
}

/// Per-item view settings for one step.
#[derive(Debug, Clone, Copy)]
pub struct ViewSpec<'a> {
    pub augment: &'a AugmentSpec,
    /// Augment the follow-up view as well as the baseline.
    pub augment_t2: bool,
    pub noise: &'a NoiseSquare,
    pub noise_target: NoiseTarget,
}

fn to_real<T: Real>(v: &[f32]) -> impl Iterator<Item = T> + '_ {
    v.iter().map(|&x| T::from_f64(x as f64))
}

/// Draw `n` items: a slice index, then independent augmentations of the
/// baseline and follow-up at that index. Returns `(t1 views, t2 views)`; the
/// second is empty when `with_t2` is off.
pub fn sample_views<T: Real, R: Rng + ?Sized>(
    data: &PairData,
    spec: &ViewSpec<'_>,
    n: usize,
    with_t2: bool,
    rng: &mut R,
) -> Result<(SliceBatch<T>, SliceBatch<T>), TrainError> {
    let (h, w) = data.plane();
    let mut t1v = Vec::with_capacity(n * h * w);
    let mut t2v = Vec::with_capacity(if with_t2 { n * h * w } else { 0 });
    for _ in 0..n {
        let z = data.slices[rng.random_range(0..data.slices.len())];
        let d1 = draw(spec.augment, rng);
        let mut a = apply_slice(&data.t1, &d1, z);
        if spec.noise_target == NoiseTarget::T1 {
            apply_noise_square(&mut a, h, w, spec.noise)?;
        }
        t1v.extend(to_real::<T>(&a));
        if with_t2 {
            let d2 = if spec.augment_t2 { draw(spec.augment, rng) } else { AugmentDraw::identity() };
            let mut b = apply_slice(&data.t2, &d2, z);
            if spec.noise_target == NoiseTarget::T2 {
                apply_noise_square(&mut b, h, w, spec.noise)?;
            }
            t2v.extend(to_real::<T>(&b));
        }
    }
    let t2_batch = if with_t2 { n } else { 0 };
    Ok((SliceBatch::new(n, h, w, t1v)?, SliceBatch::new(t2_batch, h, w, t2v)?))
}

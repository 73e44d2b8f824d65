//! Whole-volume change maps from single generators and from checkpoint
//! ensembles.

use pairgan_core::Volume;
use pairgan_nets::{Generator, Real, SliceBatch};

use crate::ensemble::CheckpointEnsemble;
use crate::error::TrainError;

/// A signed change map on the grid of the volumes it was predicted from.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap {
    pub map: Volume,
    /// Where the map came from, typically a run manifest path.
    pub provenance: Option<String>,
}

fn check_grid<T: Real>(g: &Generator<T>, t1: &Volume) -> Result<(), TrainError> {
    let s = t1.shape();
    if g.config().input_size != (s.ny(), s.nx()) {
        return Err(TrainError::Grid(format!(
            "generator takes {:?} slices but the volume grid is {s}",
            g.config().input_size
        )));
    }
    Ok(())
}

/// Map for slice `z` alone, row-major.
pub fn predict_slice<T: Real>(g: &Generator<T>, t1: &Volume, z: usize) -> Result<Vec<f32>, TrainError> {
    check_grid(g, t1)?;
    let s = t1.shape();
    let x = SliceBatch::new(1, s.ny(), s.nx(), t1.slice_z(z).iter().map(|&v| T::from_f64(v as f64)).collect())?;
    Ok(g.predict(&x)?.values.into_iter().map(|v| v.as_f64() as f32).collect())
}

/// Evaluate the generator on every z slice of `t1` independently and stack
/// the results.
pub fn predict_map<T: Real>(g: &Generator<T>, t1: &Volume) -> Result<Volume, TrainError> {
    check_grid(g, t1)?;
    let s = t1.shape();
    let mut out = Volume::zeros(s);
    out.spacing = t1.spacing;
    out.origin = t1.origin;
    for z in 0..s.nz() {
        let m = predict_slice(g, t1, z)?;
        out.slice_z_mut(z).copy_from_slice(&m);
    }
    Ok(out)
}

/// Per voxel, the mean over members whose exclusion does not cover the
/// voxel's in-plane position.
pub fn ensemble_map<T: Real>(ens: &CheckpointEnsemble<T>, t1: &Volume) -> Result<Volume, TrainError> {
    let s = t1.shape();
    if ens.plane != (s.ny(), s.nx()) {
        return Err(TrainError::Grid(format!("ensemble plane {:?} does not match grid {s}", ens.plane)));
    }
    let plane = s.slice_len();
    let mut sum = vec![0.0f64; s.len()];
    let mut count = vec![0u32; plane];
    for m in &ens.members {
        let pred = predict_map(&m.generator, t1)?;
        let keep: Vec<bool> = (0..plane).map(|i| !m.excludes(i % s.nx(), i / s.nx())).collect();
        for (i, &k) in keep.iter().enumerate() {
            count[i] += k as u32;
        }
        for (chunk, p) in sum.chunks_mut(plane).zip(pred.data().chunks(plane)) {
            for i in 0..plane {
                if keep[i] {
                    chunk[i] += p[i] as f64;
                }
            }
        }
    }
    assert!(count.iter().all(|&c| c > 0), "every pixel needs a contributing member");
    let data = sum.iter().enumerate().map(|(i, &v)| (v / count[i % plane] as f64) as f32).collect();
    Ok(t1.with_data(data))
}

use pairgan_core::io::{encode_nifti, read_mask, read_volume, write_mask, write_volume};
use pairgan_core::preprocess::{center_brain, histogram_match, normalize_unit, resample, shift_mask};
use pairgan_core::{Mask, PhantomSpec, Shape, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(shape: Shape, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Volume::from_fn(shape, |_, _, _| rng.random_range(-2.0f32..5.0));
    v.spacing = [0.5, 1.25, 3.0];
    v.origin = [12.0, -4.5, 0.125];
    v
}

#[test]
fn every_format_round_trips_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let v = noisy(Shape::new(7, 5, 3), 1);
    for name in ["a.nii", "b.nii.gz", "c.raw"] {
        let p = dir.path().join(name);
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v, "{name}");
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert!(dir.path().join("c.raw.json").exists());
}

#[test]
fn masks_round_trip_through_volume_files() {
    let dir = tempfile::tempdir().unwrap();
    let like = Volume::zeros(Shape::new(6, 6, 6));
    let m = Mask::from_fn(like.shape(), |x, y, z| (x + y * z) % 3 == 0);
    let p = dir.path().join("m.nii.gz");
    write_mask(&m, &like, &p).unwrap();
    assert_eq!(read_mask(&p).unwrap(), m);
}

#[test]
fn four_dimensional_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = encode_nifti(&noisy(Shape::new(3, 3, 3), 2));
    bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
    bytes[48..50].copy_from_slice(&1i16.to_le_bytes());
    let p = dir.path().join("four.nii");
    std::fs::write(&p, bytes).unwrap();
    assert!(read_volume(&p).unwrap_err().to_string().contains("dimension count"));
}

#[test]
fn unknown_extension_and_missing_file_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_volume(dir.path().join("x.png")).is_err());
    assert!(read_volume(dir.path().join("missing.nii")).is_err());
    assert!(read_volume(dir.path().join("missing.raw")).is_err());
}

#[test]
fn phantom_volume_reads_back_with_its_grid() {
    let dir = tempfile::tempdir().unwrap();
    let case = pairgan_core::generate(&PhantomSpec::default()).unwrap();
    pairgan_core::phantom::write_case(&case, dir.path(), ".nii.gz").unwrap();
    let t1 = read_volume(dir.path().join("t1.nii.gz")).unwrap();
    assert_eq!(t1.shape(), Shape::new(64, 64, 32));
    assert_eq!(t1, case.t1);
    assert_eq!(read_mask(dir.path().join("seg2.nii.gz")).unwrap(), case.seg2);
}

#[test]
fn resample_at_equal_shape_is_identity() {
    let v = noisy(Shape::new(9, 8, 7), 3);
    let r = resample(&v, v.shape()).unwrap();
    assert!(r.data().iter().zip(v.data()).all(|(a, b)| ((a - b) as f64).abs() < 1e-9));
    assert_eq!(r.spacing, v.spacing);
}

#[test]
fn resample_keeps_constants() {
    let v = Volume::filled(Shape::new(10, 7, 5), 0.375);
    for target in [Shape::new(4, 4, 4), Shape::new(21, 3, 9), Shape::new(1, 1, 1)] {
        let r = resample(&v, target).unwrap();
        assert_eq!(r.shape(), target);
        assert!(r.data().iter().all(|&x| x == 0.375));
    }
}

#[test]
fn downsampled_ramp_keeps_its_endpoints() {
    let (n, m) = (64usize, 32usize);
    let v = Volume::from_fn(Shape::new(n, 6, 4), |x, _, _| x as f32 / (n - 1) as f32);
    let r = resample(&v, Shape::new(m, 3, 2)).unwrap();
    for z in 0..2 {
        for y in 0..3 {
            for i in 0..m {
                // closed form: output sample i sits at source position i * (n-1)/(m-1)
                let expect = i as f64 / (m - 1) as f64;
                assert!((r.get(i, y, z) as f64 - expect).abs() < 1e-6);
            }
            assert_eq!((r.get(0, y, z), r.get(m - 1, y, z)), (0.0, 1.0));
        }
    }
    // first-to-last voxel distance is unchanged
    let extent = |v: &Volume| (0..3).map(|a| (v.shape().0[a] - 1) as f64 * v.spacing[a]).collect::<Vec<_>>();
    let (a, b) = (extent(&v), extent(&r));
    assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
}

/// Foreground (above mean) quantiles at percentiles 0..=100, by sorting.
fn fg_quantiles(v: &Volume) -> Vec<f64> {
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / v.data().len() as f64;
    let mut fg: Vec<f64> = v.data().iter().map(|&x| x as f64).filter(|&x| x > mean).collect();
    fg.sort_by(f64::total_cmp);
    (0..=100)
        .map(|k| {
            let pos = k as f64 / 100.0 * (fg.len() - 1) as f64;
            let (lo, t) = (pos.floor() as usize, pos.fract());
            fg[lo] + (fg[(lo + 1).min(fg.len() - 1)] - fg[lo]) * t
        })
        .collect()
}

/// Width of one level of a 128-level histogram spanning the foreground.
fn max_bin(q: &[f64]) -> f64 {
    (q[q.len() - 1] - q[0]) / 128.0
}

#[test]
fn self_matching_moves_no_voxel_more_than_one_bin() {
    for seed in 0..3 {
        let v = pairgan_core::generate(&PhantomSpec { seed, ..Default::default() }).unwrap().t1;
        let m = histogram_match(&v, &v);
        assert!(m.warning.is_none());
        let bin = max_bin(&fg_quantiles(&v));
        let worst = m.volume.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        assert!(worst <= bin, "worst {worst} vs bin {bin}");
    }
}

#[test]
fn matching_a_scaled_copy_recovers_reference_quantiles() {
    let reference = noisy(Shape::new(24, 20, 16), 9);
    let moving = reference.with_data(reference.data().iter().map(|x| 2.0 * x).collect());
    let out = histogram_match(&moving, &reference).volume;
    let (qr, qo) = (fg_quantiles(&reference), fg_quantiles(&out));
    let bin = max_bin(&qr);
    for (a, b) in qr.iter().zip(&qo) {
        assert!((a - b).abs() <= bin, "{a} vs {b}");
    }
}

#[test]
fn matched_intensities_are_monotone_in_the_source() {
    let a = noisy(Shape::new(16, 16, 8), 4);
    let b = noisy(Shape::new(12, 12, 12), 5).with_data(noisy(Shape::new(12, 12, 12), 5).data().iter().map(|x| x * x).collect());
    let m = histogram_match(&a, &b).volume;
    let mut pairs: Vec<(f32, f32)> = a.data().iter().copied().zip(m.data().iter().copied()).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn centering_a_known_offset() {
    let s = Shape::new(64, 64, 32);
    // box centred at grid centre + (5, -3, 2), centroid computed by direct summation
    let m = Mask::from_fn(s, |x, y, z| (33..41).contains(&x) && (25..33).contains(&y) && (15..21).contains(&z));
    let (mut sum, mut n) = ([0.0f64; 3], 0.0);
    for z in 0..32 {
        for y in 0..64 {
            for x in 0..64 {
                if m.get(x, y, z) {
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    n += 1.0;
                }
            }
        }
    }
    assert_eq!(sum.map(|v| v / n), [36.5, 28.5, 17.5]);
    let v = m.to_volume(&Volume::zeros(s));
    let (_, shift) = center_brain(&v, &m).unwrap();
    // rounding 36.5 -> 37, 28.5 -> 29, 17.5 -> 18
    assert_eq!(shift, [-5, 3, -2]);
}

#[test]
fn centred_mask_is_already_centred() {
    let s = Shape::new(16, 16, 8);
    let m = Mask::from_fn(s, |x, y, z| (7..10).contains(&x) && (7..10).contains(&y) && (3..6).contains(&z));
    let v = noisy(s, 6);
    let (c, shift) = center_brain(&v, &m).unwrap();
    assert_eq!(shift, [0, 0, 0]);
    assert_eq!(c, v);
}

proptest! {
    #[test]
    fn normalize_hits_zero_and_one_exactly(vals in proptest::collection::vec(-1e4f32..1e4, 2..200)) {
        prop_assume!(vals.iter().any(|&v| v != vals[0]));
        let n = vals.len();
        let v = Volume::new(Shape::new(n, 1, 1), [1.0; 3], [0.0; 3], vals).unwrap();
        let u = normalize_unit(&v);
        let (lo, hi) = u.min_max();
        prop_assert_eq!((lo, hi), (0.0, 1.0));
        prop_assert!(u.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn centering_preserves_in_bounds_intensities(seed in 0u64..1000, cx in 2usize..14, cy in 2usize..14, cz in 1usize..7) {
        let s = Shape::new(16, 16, 8);
        let v = noisy(s, seed);
        let m = Mask::from_fn(s, |x, y, z| x.abs_diff(cx) <= 1 && y.abs_diff(cy) <= 2 && z.abs_diff(cz) <= 1);
        let (c, shift) = center_brain(&v, &m).unwrap();
        // every voxel that stays in bounds carries its value, everything else is zero
        let mut expected = vec![0.0f32; s.len()];
        for z in 0..8i64 {
            for y in 0..16i64 {
                for x in 0..16i64 {
                    let d = [x + shift[0], y + shift[1], z + shift[2]];
                    if (0..3).all(|a| d[a] >= 0 && d[a] < s.0[a] as i64) {
                        expected[s.index(d[0] as usize, d[1] as usize, d[2] as usize)] = v.get(x as usize, y as usize, z as usize);
                    }
                }
            }
        }
        prop_assert_eq!(c.data(), expected.as_slice());
        let moved = shift_mask(&m, shift);
        prop_assert_eq!(moved.count(), m.count());
        let mut fg_in: Vec<u32> = (0..s.len()).filter(|&i| m.data()[i]).map(|i| v.data()[i].to_bits()).collect();
        let mut fg_out: Vec<u32> = (0..s.len()).filter(|&i| moved.data()[i]).map(|i| c.data()[i].to_bits()).collect();
        fg_in.sort();
        fg_out.sort();
        prop_assert_eq!(fg_in, fg_out);
    }
}

#[test]
fn matching_does_not_brighten_background_when_the_tumor_shrinks() {
    let spec = PhantomSpec { tumor_radii_t1: [8.0; 3], tumor_radii_t2: [4.0; 3], ..Default::default() };
    let c = pairgan_core::generate(&spec).unwrap();
    let m = histogram_match(&c.t2, &c.t1).volume;
    let level = 0.5 * (spec.background + spec.tumor_intensity) as f32;
    let outside = |v: &Volume| (0..v.data().len()).filter(|&i| v.data()[i] > level && !c.seg2.data()[i]).count();
    // edge voxels of the tumor may already be above the level
    let (before, after) = (outside(&c.t2), outside(&m));
    assert!(after.saturating_sub(before) * 20 < c.seg1.count(), "{before} -> {after} bright voxels outside the tumor");
}

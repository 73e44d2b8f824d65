use pairgan_core::augment::{apply, apply_slice, draw, AugmentDraw, AugmentSpec};
use pairgan_core::preprocess::shift_volume;
use pairgan_core::{Shape, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blob(shape: Shape) -> Volume {
    let c = shape.0.map(|n| (n as f64 - 1.0) / 2.0);
    Volume::from_fn(shape, |x, y, z| {
        let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
        (-d2 / (2.0 * 36.0)).exp() as f32
    })
}

/// Kolmogorov-Smirnov distance of `xs` from Uniform[lo, hi].
fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn draws_stay_in_bounds_and_are_uniform() {
    let spec = AugmentSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws: Vec<AugmentDraw> = (0..100_000).map(|_| draw(&spec, &mut rng)).collect();
    assert!(draws.iter().all(|d| d.angles_deg.iter().all(|a| a.abs() <= 15.0)));
    assert!(draws.iter().all(|d| d.shifts_vox.iter().all(|s| s.abs() <= 10.0)));
    assert!(draws.iter().all(|d| (0.0..=0.1).contains(&d.noise_variance)));
    // asymptotic KS critical value at alpha = 0.01
    let crit = 1.628 / (draws.len() as f64).sqrt();
    for a in 0..3 {
        assert!(ks_uniform(draws.iter().map(|d| d.angles_deg[a]).collect(), -15.0, 15.0) < crit);
        assert!(ks_uniform(draws.iter().map(|d| d.shifts_vox[a]).collect(), -10.0, 10.0) < crit);
    }
    assert!(ks_uniform(draws.iter().map(|d| d.noise_variance).collect(), 0.0, 0.1) < crit);
}

#[test]
fn same_state_same_draw() {
    let spec = AugmentSpec::default();
    let a = draw(&spec, &mut ChaCha8Rng::seed_from_u64(3));
    let b = draw(&spec, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
}

#[test]
fn identity_draw_is_bit_exact() {
    let v = blob(Shape::new(12, 10, 8));
    assert_eq!(apply(&v, &AugmentDraw::identity()), v);
    let mut d = AugmentDraw::identity();
    d.noise_seed = 99;
    for z in 0..8 {
        assert_eq!(apply_slice(&v, &d, z), v.slice_z(z));
    }
}

#[test]
fn integer_shift_is_an_exact_translation() {
    let v = blob(Shape::new(16, 12, 10));
    let d = AugmentDraw { shifts_vox: [3.0, -2.0, 1.0], ..AugmentDraw::identity() };
    assert_eq!(apply(&v, &d), shift_volume(&v, [3, -2, 1]));
}

#[test]
fn rotating_back_recovers_a_smooth_volume() {
    let v = blob(Shape::new(32, 32, 24));
    for axis in 0..3 {
        let mut angles = [0.0; 3];
        angles[axis] = 12.0;
        let fwd = AugmentDraw { angles_deg: angles, ..AugmentDraw::identity() };
        let back = AugmentDraw { angles_deg: angles.map(|a| -a), ..AugmentDraw::identity() };
        let r = apply(&apply(&v, &fwd), &back);
        let mad = r.data().iter().zip(v.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / v.data().len() as f64;
        assert!(mad < 0.02, "axis {axis}: {mad}");
        // and the rotation did something
        let moved = apply(&v, &fwd).data().iter().zip(v.data()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        assert!(moved > 1e-3);
    }
}

#[test]
fn noise_has_the_drawn_variance() {
    let shape = Shape::new(128, 128, 64);
    let zero = Volume::zeros(shape);
    let d = AugmentDraw { noise_variance: 0.05, noise_seed: 5, ..AugmentDraw::identity() };
    let out = apply(&zero, &d);
    let n = out.data().len() as f64;
    assert!(n >= 1e6);
    let mean = out.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = out.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 3.0 * 0.05f64.sqrt() / n.sqrt(), "mean {mean}");
    assert!((var - 0.05).abs() < 0.005, "variance {var}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn slices_match_the_full_volume_and_stay_finite(seed in 0u64..10_000) {
        let v = blob(Shape::new(16, 14, 6));
        let d = draw(&AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let full = apply(&v, &d);
        prop_assert!(full.is_finite());
        for z in 0..6 {
            let s = apply_slice(&v, &d, z);
            prop_assert_eq!(s.as_slice(), full.slice_z(z));
        }
    }
}

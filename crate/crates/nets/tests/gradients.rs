//! Finite-difference checks of every hand-written backward pass, in f64.

use pairgan_nets::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> SliceBatch<f64> {
    SliceBatch::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Visit the `k`-th scalar parameter (in visiting order) mutably.
fn with_param<P: Parameterized<f64>>(model: &mut P, k: usize, f: impl FnOnce(&mut f64)) {
    let mut seen = 0;
    let mut f = Some(f);
    model.visit_params_mut(&mut |p| {
        if k >= seen && k < seen + p.len() {
            if let Some(f) = f.take() {
                f(&mut p.value[k - seen]);
            }
        }
        seen += p.len();
    });
}

#[test]
fn generator_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = GeneratorConfig { depth: 3, base_width: 2, input_size: (8, 8) };
    let mut g = Generator::<f64>::new(cfg, 5).unwrap();
    let x = batch(2, 8, 8, &mut rng);
    let probe = batch(2, 8, 8, &mut rng);
    let loss = |g: &mut Generator<f64>| {
        let (m, _) = g.forward_train(&x, false).unwrap();
        m.values.iter().zip(&probe.values).map(|(a, b)| a * b).sum::<f64>()
    };
    g.zero_grad();
    let (_, cache) = g.forward_train(&x, false).unwrap();
    g.backward(&cache, &probe);
    let grads = g.flat_grads();
    let n = grads.len();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in (0..n).step_by(n / 60 + 1) {
        with_param(&mut g, k, |v| *v += h);
        let fp = loss(&mut g);
        with_param(&mut g, k, |v| *v -= 2.0 * h);
        let fm = loss(&mut g);
        with_param(&mut g, k, |v| *v += h);
        let fd = (fp - fm) / (2.0 * h);
        if fd.abs() > 1e-7 || grads[k].abs() > 1e-7 {
            worst = worst.max(rel_err(fd, grads[k]));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn critic_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = CriticConfig { depth: 3, base_width: 3, input_size: (8, 8), leaky_slope: 0.2 };
    let mut c = Critic::<f64>::new(cfg, 6).unwrap();
    let x = batch(3, 8, 8, &mut rng);
    let w = [0.5, -1.0, 2.0];
    let loss = |c: &Critic<f64>| c.scores(&x).unwrap().iter().zip(&w).map(|(s, w)| s * w).sum::<f64>();
    c.zero_grad();
    let (_, cache) = c.forward(&x).unwrap();
    c.backward_params(&cache, &w);
    let grads = c.flat_grads();
    let h = 1e-6;
    for k in 0..grads.len() {
        with_param(&mut c, k, |v| *v += h);
        let fp = loss(&c);
        with_param(&mut c, k, |v| *v -= 2.0 * h);
        let fm = loss(&c);
        with_param(&mut c, k, |v| *v += h);
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - grads[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", grads[k]);
    }
}

#[test]
fn critic_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = CriticConfig { depth: 2, base_width: 8, input_size: (8, 8), leaky_slope: 0.2 };
    let c = Critic::<f64>::new(cfg, 7).unwrap();
    let x = batch(2, 8, 8, &mut rng);
    let g = c.input_gradient(&x).unwrap();
    let h = 1e-6;
    for i in 0..x.values.len() {
        let mut xp = x.clone();
        xp.values[i] += h;
        let mut xm = x.clone();
        xm.values[i] -= h;
        let item = i / 64;
        let fd = (c.scores(&xp).unwrap()[item] - c.scores(&xm).unwrap()[item]) / (2.0 * h);
        assert!((fd - g.values[i]).abs() < 1e-8 + 1e-4 * fd.abs(), "pixel {i}");
    }
}

#[test]
fn penalty_of_a_constant_critic_is_lambda() {
    let mut c = Critic::<f64>::new(CriticConfig { depth: 2, base_width: 4, input_size: (8, 8), leaky_slope: 0.2 }, 1).unwrap();
    c.head.weight.value.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for lambda in [1.0, 10.0, 0.3] {
        let p = c.gradient_penalty(&batch(4, 8, 8, &mut rng), lambda, false).unwrap();
        assert!((p.value - lambda).abs() < 1e-12);
        assert!(p.grad_norms.iter().all(|&n| n == 0.0));
    }
}

#[test]
fn penalty_vanishes_for_unit_norm_linear_critic() {
    // one 3x3 conv with a single centre tap feeding the head: C(x) = mean(w . x) on a 2x2 grid,
    // linear once all pre-activations are positive
    let cfg = CriticConfig { depth: 1, base_width: 1, input_size: (2, 2), leaky_slope: 0.2 };
    let mut c = Critic::<f64>::new(cfg, 0).unwrap();
    c.convs[0].weight.value = vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
    c.convs[0].bias.as_mut().unwrap().value[0] = 1.0;
    c.head.weight.value[0] = 1.0;
    // gradient per pixel = 2 * 1 / 4 = 0.5 on 4 pixels -> norm 1
    let x = SliceBatch::new(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
    let p = c.gradient_penalty(&x, 10.0, true).unwrap();
    assert!(p.value.abs() < 1e-24);
    assert!(p.grad_norms.iter().all(|n| (n - 1.0).abs() < 1e-15));
    assert!(c.flat_grads().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn penalty_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let cfg = CriticConfig { depth: 3, base_width: 3, input_size: (8, 8), leaky_slope: 0.2 };
    let mut c = Critic::<f64>::new(cfg, 8).unwrap();
    let x = batch(3, 8, 8, &mut rng);
    let lambda = 10.0;
    c.zero_grad();
    c.gradient_penalty(&x, lambda, true).unwrap();
    let grads = c.flat_grads();
    let h = 1e-6;
    let mut checked = 0;
    for k in 0..grads.len() {
        with_param(&mut c, k, |v| *v += h);
        let fp = c.gradient_penalty(&x, lambda, false).unwrap().value;
        with_param(&mut c, k, |v| *v -= 2.0 * h);
        let fm = c.gradient_penalty(&x, lambda, false).unwrap().value;
        with_param(&mut c, k, |v| *v += h);
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - grads[k]).abs() < 1e-6 + 1e-4 * fd.abs(), "param {k}: fd {fd} vs {}", grads[k]);
        checked += 1;
    }
    assert_eq!(checked, c.param_count());
}

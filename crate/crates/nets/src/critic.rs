//! Encoder critic: stacks of 3x3 convolutions with leaky ReLU, 2x2 max pooling
//! between levels, a 1x1 convolution down to one feature and a spatial mean.
//!
//! The critic is piecewise linear in its input, so for fixed activation
//! patterns its input gradient is a linear chain of transposed convolutions
//! and masks. The gradient penalty differentiates that chain with respect to
//! the weights directly instead of building a second-order graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NetError;
use crate::generator::validate_geometry;
use crate::layers::Conv2d;
use crate::manifest::{LayerKind, LayerSpec};
use crate::ops::{self, Geometry, Unfolded};
use crate::param::{Param, Parameterized};
use crate::scalar::Real;
use crate::tensor::{Feat, SliceBatch};

const CONV3: Geometry = Geometry::new(3, 1, 1);
const POINT: Geometry = Geometry::new(1, 1, 0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub depth: usize,
    pub base_width: usize,
    pub input_size: (usize, usize),
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    0.2
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { depth: 5, base_width: 16, input_size: (256, 256), leaky_slope: default_slope() }
    }
}

impl CriticConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Convolutions per level: one on the two top levels, two below.
    pub fn convs_at(&self, level: usize) -> usize {
        if level < 2 {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        validate_geometry("critic", self.depth, self.base_width, self.input_size)?;
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(NetError::Config("critic: leaky slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

struct ConvCache<T> {
    unfolded: Unfolded<T>,
    pre_act: Feat<T>,
}

/// Forward-pass state needed by the backward passes.
pub struct CriticCache<T> {
    convs: Vec<ConvCache<T>>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    head: Unfolded<T>,
    input_hw: (usize, usize),
}

/// Result of a gradient-penalty evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    /// `lambda * mean_i (||grad_i|| - 1)^2`
    pub value: f64,
    /// Per-sample input-gradient norms.
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T> {
    config: CriticConfig,
    /// Convolutions in execution order; `level_of[i]` gives each one's level.
    pub convs: Vec<Conv2d<T>>,
    level_of: Vec<usize>,
    pub head: Conv2d<T>,
}

impl<T: Real> Critic<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut level_of = Vec::new();
        let mut in_ch = 1;
        for l in 0..config.depth {
            let w = config.width(l);
            for j in 0..config.convs_at(l) {
                convs.push(Conv2d::new(&format!("level{l}.{j}"), in_ch, w, CONV3, true, &mut rng));
                level_of.push(l);
                in_ch = w;
            }
        }
        let head = Conv2d::new("head", in_ch, 1, POINT, true, &mut rng);
        Ok(Self { config, convs, level_of, head })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    fn slope(&self) -> T {
        T::from_f64(self.config.leaky_slope)
    }

    fn check_input(&self, x: &SliceBatch<T>) -> Result<(), NetError> {
        if (x.height, x.width) != self.config.input_size {
            return Err(NetError::Shape(format!(
                "critic expects {:?} slices, got {}x{}",
                self.config.input_size, x.height, x.width
            )));
        }
        Ok(())
    }

    /// One score per batch item.
    pub fn scores(&self, x: &SliceBatch<T>) -> Result<Vec<T>, NetError> {
        self.forward(x).map(|(s, _)| s)
    }

    pub fn forward(&self, x: &SliceBatch<T>) -> Result<(Vec<T>, CriticCache<T>), NetError> {
        self.check_input(x)?;
        let slope = self.slope();
        let mut a = x.to_feat();
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut pools = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let (z, unfolded) = conv.forward(&a);
            a = ops::leaky_relu(&z, slope);
            convs.push(ConvCache { unfolded, pre_act: z });
            if self.pools_after(i) {
                let (p, idx) = ops::maxpool2_forward(&a);
                pools.push((idx, a.h, a.w));
                a = p;
            }
        }
        let (map, head) = self.head.forward(&a);
        let per = map.h * map.w;
        let scores = (0..map.n)
            .map(|n| {
                let s: f64 = map.data[n * per..(n + 1) * per].iter().map(|v| v.as_f64()).sum();
                T::from_f64(s / per as f64)
            })
            .collect();
        Ok((scores, CriticCache { convs, pools, head, input_hw: (x.height, x.width) }))
    }

    /// Seed of the backward chain: `d_score_i / (h*w)` at every position of the final map.
    fn head_seed(&self, cache: &CriticCache<T>, d_scores: &[T]) -> Feat<T> {
        let (_, n, h, w) = cache.head.input_dims();
        assert_eq!(d_scores.len(), n, "one score gradient per batch item");
        let per = h * w;
        let inv = T::from_f64(1.0 / per as f64);
        let mut seed = Feat::zeros(1, n, h, w);
        for (i, &d) in d_scores.iter().enumerate() {
            seed.data[i * per..(i + 1) * per].fill(d * inv);
        }
        seed
    }

    /// Backward chain from score gradients to the input. Returns the input
    /// gradient, the gradient at every convolution's pre-activation, and the
    /// seed at the head output. Parameters are not touched.
    fn backward_chain(&self, cache: &CriticCache<T>, d_scores: &[T]) -> (Feat<T>, Vec<Feat<T>>, Feat<T>) {
        let slope = self.slope();
        let seed = self.head_seed(cache, d_scores);
        let (_, _, hh, hw) = cache.head.input_dims();
        let mut d = self.head.input_grad(&seed, hh, hw);
        let mut pre_grads: Vec<Option<Feat<T>>> = (0..self.convs.len()).map(|_| None).collect();
        let mut pool_i = cache.pools.len();
        for i in (0..self.convs.len()).rev() {
            if self.pools_after(i) {
                pool_i -= 1;
                let (idx, h, w) = &cache.pools[pool_i];
                d = ops::maxpool2_backward(&d, idx, *h, *w);
            }
            ops::leaky_relu_scale(&mut d, &cache.convs[i].pre_act, slope);
            let (_, _, h, w) = cache.convs[i].unfolded.input_dims();
            let dx = self.convs[i].input_grad(&d, h, w);
            pre_grads[i] = Some(std::mem::replace(&mut d, dx));
        }
        (d, pre_grads.into_iter().map(|g| g.expect("visited")).collect(), seed)
    }

    fn pools_after(&self, i: usize) -> bool {
        let level = self.level_of[i];
        let last_in_level = self.level_of.get(i + 1).is_none_or(|&next| next != level);
        last_in_level && level + 1 < self.config.depth
    }

    /// Accumulate parameter gradients of `sum_i d_scores[i] * C(x_i)`.
    pub fn backward_params(&mut self, cache: &CriticCache<T>, d_scores: &[T]) {
        let (_, pre_grads, seed) = self.backward_chain(cache, d_scores);
        for (i, g) in pre_grads.iter().enumerate() {
            self.convs[i].accumulate_grads(&cache.convs[i].unfolded, g);
        }
        self.head.accumulate_grads(&cache.head, &seed);
    }

    /// Gradient of `sum_i d_scores[i] * C(x_i)` with respect to the input.
    pub fn input_grad(&self, cache: &CriticCache<T>, d_scores: &[T]) -> SliceBatch<T> {
        SliceBatch::from_feat(self.backward_chain(cache, d_scores).0)
    }

    /// `dC(x_i)/dx_i` for every batch item.
    pub fn input_gradient(&self, x: &SliceBatch<T>) -> Result<SliceBatch<T>, NetError> {
        let (_, cache) = self.forward(x)?;
        Ok(self.input_grad(&cache, &vec![T::one(); x.batch]))
    }

    /// Gradient penalty `lambda * mean_i (||dC/dx (x_i)||_2 - 1)^2` at the
    /// points `x`. When `accumulate` is set its parameter gradient is added to
    /// the `grad` buffers.
    pub fn gradient_penalty(&mut self, x: &SliceBatch<T>, lambda: f64, accumulate: bool) -> Result<Penalty, NetError> {
        let (_, cache) = self.forward(x)?;
        let n = x.batch;
        let ones = vec![T::one(); n];
        let (g, pre_grads, seed) = self.backward_chain(&cache, &ones);
        let per = x.height * x.width;
        let mut norms = Vec::with_capacity(n);
        let mut value = 0.0;
        let mut gamma = Feat::zeros(1, n, x.height, x.width);
        for i in 0..n {
            let gi = &g.data[i * per..(i + 1) * per];
            let norm = gi.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            value += (norm - 1.0).powi(2);
            norms.push(norm);
            if norm > 0.0 {
                let coef = T::from_f64(lambda / n as f64 * 2.0 * (norm - 1.0) / norm);
                for (o, &v) in gamma.data[i * per..(i + 1) * per].iter_mut().zip(gi) {
                    *o = coef * v;
                }
            }
        }
        let value = lambda * value / n as f64;
        if accumulate && lambda != 0.0 {
            self.penalty_param_grads(&cache, gamma, &pre_grads, &seed);
        }
        Ok(Penalty { value, grad_norms: norms })
    }

    /// Adjoint of the input-gradient chain: pushes `gamma = dP/d(input grad)`
    /// forward through the linearised network and accumulates weight gradients.
    /// Biases do not enter the input gradient, so they receive nothing.
    fn penalty_param_grads(&mut self, cache: &CriticCache<T>, gamma: Feat<T>, pre_grads: &[Feat<T>], seed: &Feat<T>) {
        let slope = self.slope();
        let mut gam = gamma;
        let mut pool_i = 0;
        for i in 0..self.convs.len() {
            let conv = &mut self.convs[i];
            let u = Unfolded::new(&gam, conv.geom);
            ops::conv2d_weight_grad(&u, &pre_grads[i], &mut conv.weight.grad, conv.geom);
            gam = conv.forward_unfolded(&u, false);
            ops::leaky_relu_scale(&mut gam, &cache.convs[i].pre_act, slope);
            if self.pools_after(i) {
                let (idx, h, w) = &cache.pools[pool_i];
                pool_i += 1;
                gam = ops::maxpool2_gather(&gam, idx, h / 2, w / 2);
            }
        }
        let u = Unfolded::new(&gam, POINT);
        ops::conv2d_weight_grad(&u, seed, &mut self.head.weight.grad, POINT);
    }

    pub fn manifest(&self) -> Vec<LayerSpec> {
        critic_manifest(&self.config)
    }

    pub fn input_hw(cache: &CriticCache<T>) -> (usize, usize) {
        cache.input_hw
    }
}

impl<T: Real> Parameterized<T> for Critic<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for c in &self.convs {
            c.params().for_each(&mut *f);
        }
        self.head.params().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for c in &mut self.convs {
            c.params_mut().for_each(&mut *f);
        }
        self.head.params_mut().for_each(f);
    }
}

/// Scores for a batch; shorthand for [`Critic::scores`].
pub fn critic_forward<T: Real>(c: &Critic<T>, x: &SliceBatch<T>) -> Result<Vec<T>, NetError> {
    c.scores(x)
}

pub fn critic_manifest(cfg: &CriticConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let (mut h, mut w) = cfg.input_size;
    let mut cin = 1;
    for l in 0..cfg.depth {
        let c = cfg.width(l);
        for j in 0..cfg.convs_at(l) {
            out.push(LayerSpec::new(format!("level{l}.{j}"), LayerKind::Conv, cin, c, (h, w)).kernel(3, 1));
            out.push(LayerSpec::new(format!("level{l}.{j}.act"), LayerKind::LeakyRelu, c, c, (h, w)));
            cin = c;
        }
        if l + 1 < cfg.depth {
            h /= 2;
            w /= 2;
            out.push(LayerSpec::new(format!("level{l}.pool"), LayerKind::MaxPool, c, c, (h, w)).kernel(2, 2));
        }
    }
    out.push(LayerSpec::new("head", LayerKind::Conv, cin, 1, (h, w)).kernel(1, 1));
    out.push(LayerSpec::new("mean", LayerKind::SpatialMean, 1, 1, (1, 1)));
    out
}

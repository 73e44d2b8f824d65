//! U-Net generator producing an additive change map for a batch of slices.
//!
//! Every level applies two `3x3 conv -> batch norm -> ReLU` blocks. The
//! encoder downsizes with 2x2 max pooling, the decoder upsizes with a 4x4
//! stride-2 transposed convolution and concatenates the encoder features of
//! the same resolution. A linear 1x1 convolution produces the signed map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NetError;
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Mode};
use crate::manifest::{LayerKind, LayerSpec};
use crate::ops::{self, BatchNormCache, Geometry, Unfolded};
use crate::param::{Param, Parameterized};
use crate::scalar::Real;
use crate::tensor::{Feat, SliceBatch};

const CONV3: Geometry = Geometry::new(3, 1, 1);
const UP4: Geometry = Geometry::new(4, 2, 1);
const POINT: Geometry = Geometry::new(1, 1, 0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub depth: usize,
    pub base_width: usize,
    pub input_size: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { depth: 5, base_width: 32, input_size: (256, 256) }
    }
}

impl GeneratorConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<(), NetError> {
        validate_geometry("generator", self.depth, self.base_width, self.input_size)
    }
}

pub(crate) fn validate_geometry(
    what: &str,
    depth: usize,
    base_width: usize,
    (h, w): (usize, usize),
) -> Result<(), NetError> {
    if depth == 0 || base_width == 0 {
        return Err(NetError::Config(format!("{what}: depth and base width must be positive")));
    }
    let div = 1usize << (depth - 1);
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(NetError::Config(format!(
            "{what}: input {h}x{w} must be positive and divisible by 2^(depth-1) = {div}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

struct BlockCache<T> {
    unfolded: Unfolded<T>,
    bn: BatchNormCache<T>,
    out: Feat<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, CONV3, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_ch),
        }
    }

    fn forward_stateless(&self, x: &Feat<T>, batch_stats: bool) -> Feat<T> {
        let (z, _) = self.conv.forward(x);
        let mut y = if batch_stats { self.bn.forward_batch(&z) } else { self.bn.forward_eval(&z) };
        ops::relu_inplace(&mut y);
        y
    }

    fn forward_train(&mut self, x: &Feat<T>, update_stats: bool) -> (Feat<T>, BlockCache<T>) {
        let (z, unfolded) = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward_train(&z, update_stats);
        ops::relu_inplace(&mut y);
        (y.clone(), BlockCache { unfolded, bn, out: y })
    }

    fn backward(&mut self, cache: &BlockCache<T>, mut d: Feat<T>, need_input: bool) -> Option<Feat<T>> {
        ops::relu_backward(&mut d, &cache.out);
        let d = self.bn.backward(&d, &cache.bn);
        self.conv.accumulate_grads(&cache.unfolded, &d);
        need_input.then(|| {
            let (_, _, h, w) = cache.unfolded.input_dims();
            self.conv.input_grad(&d, h, w)
        })
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv.params().chain(self.bn.params()).for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.params_mut().for_each(&mut *f);
        self.bn.params_mut().for_each(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct UpLevel<T> {
    upconv: ConvTranspose2d<T>,
    blocks: [ConvBlock<T>; 2],
}

/// Intermediate state of a training-mode forward pass.
pub struct GeneratorCache<T> {
    down: Vec<[BlockCache<T>; 2]>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    up: Vec<(Feat<T>, [BlockCache<T>; 2])>,
    head: Unfolded<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    config: GeneratorConfig,
    down: Vec<[ConvBlock<T>; 2]>,
    /// `up[l]` maps level `l + 1` features back to level `l`.
    up: Vec<UpLevel<T>>,
    pub head: Conv2d<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut down = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let in_ch = if l == 0 { 1 } else { config.width(l - 1) };
            let w = config.width(l);
            down.push([
                ConvBlock::new(&format!("down{l}.0"), in_ch, w, &mut rng),
                ConvBlock::new(&format!("down{l}.1"), w, w, &mut rng),
            ]);
        }
        let mut up = Vec::with_capacity(config.depth.saturating_sub(1));
        for l in 0..config.depth - 1 {
            let (w, w_below) = (config.width(l), config.width(l + 1));
            up.push(UpLevel {
                upconv: ConvTranspose2d::new(&format!("up{l}.upconv"), w_below, w, UP4, &mut rng),
                blocks: [
                    ConvBlock::new(&format!("up{l}.0"), 2 * w, w, &mut rng),
                    ConvBlock::new(&format!("up{l}.1"), w, w, &mut rng),
                ],
            });
        }
        let head = Conv2d::new("head", config.width(0), 1, POINT, true, &mut rng);
        Ok(Self { config, down, up, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn check_input(&self, x: &SliceBatch<T>) -> Result<(), NetError> {
        if (x.height, x.width) != self.config.input_size {
            return Err(NetError::Shape(format!(
                "generator expects {:?} slices, got {}x{}",
                self.config.input_size, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (running batch-norm statistics).
    pub fn predict(&self, x: &SliceBatch<T>) -> Result<SliceBatch<T>, NetError> {
        self.forward_stateless(x, false)
    }

    /// Training-mode forward pass that keeps no cache and leaves the running
    /// statistics untouched. Matches `forward_train(x, false)` exactly.
    pub fn forward_batch_stats(&self, x: &SliceBatch<T>) -> Result<SliceBatch<T>, NetError> {
        self.forward_stateless(x, true)
    }

    fn forward_stateless(&self, x: &SliceBatch<T>, batch_stats: bool) -> Result<SliceBatch<T>, NetError> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut h = x.to_feat();
        let mut skips = Vec::with_capacity(depth);
        for (l, [b0, b1]) in self.down.iter().enumerate() {
            let y = b1.forward_stateless(&b0.forward_stateless(&h, batch_stats), batch_stats);
            if l + 1 < depth {
                h = ops::maxpool2_forward(&y).0;
                skips.push(y);
            } else {
                h = y;
            }
        }
        for l in (0..depth - 1).rev() {
            let lvl = &self.up[l];
            let cat = lvl.upconv.forward(&h).concat_channels(&skips[l]);
            h = lvl.blocks[1].forward_stateless(&lvl.blocks[0].forward_stateless(&cat, batch_stats), batch_stats);
        }
        let (m, _) = self.head.forward(&h);
        Ok(SliceBatch::from_feat(m))
    }

    /// Training-mode forward pass with batch statistics. `update_stats`
    /// controls whether running averages move.
    pub fn forward_train(
        &mut self,
        x: &SliceBatch<T>,
        update_stats: bool,
    ) -> Result<(SliceBatch<T>, GeneratorCache<T>), NetError> {
        self.check_input(x)?;
        let depth = self.config.depth;
        let mut h = x.to_feat();
        let mut skips = Vec::with_capacity(depth);
        let mut down_c = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        for l in 0..depth {
            let [b0, b1] = &mut self.down[l];
            let (y0, c0) = b0.forward_train(&h, update_stats);
            let (y1, c1) = b1.forward_train(&y0, update_stats);
            down_c.push([c0, c1]);
            if l + 1 < depth {
                let (p, idx) = ops::maxpool2_forward(&y1);
                pools.push((idx, y1.h, y1.w));
                h = p;
                skips.push(y1);
            } else {
                h = y1;
            }
        }
        let mut up_c: Vec<Option<(Feat<T>, [BlockCache<T>; 2])>> = (0..depth - 1).map(|_| None).collect();
        for l in (0..depth - 1).rev() {
            let lvl = &mut self.up[l];
            let cat = lvl.upconv.forward(&h).concat_channels(&skips[l]);
            let (y0, c0) = lvl.blocks[0].forward_train(&cat, update_stats);
            let (y1, c1) = lvl.blocks[1].forward_train(&y0, update_stats);
            up_c[l] = Some((std::mem::replace(&mut h, y1), [c0, c1]));
        }
        let (m, head) = self.head.forward(&h);
        let cache = GeneratorCache {
            down: down_c,
            pools,
            up: up_c.into_iter().map(|c| c.expect("every decoder level ran")).collect(),
            head,
        };
        Ok((SliceBatch::from_feat(m), cache))
    }

    /// Backpropagate `d_map` (gradient of the loss w.r.t. the map) and
    /// accumulate parameter gradients.
    pub fn backward(&mut self, cache: &GeneratorCache<T>, d_map: &SliceBatch<T>) {
        let depth = self.config.depth;
        let d_out = d_map.to_feat();
        self.head.accumulate_grads(&cache.head, &d_out);
        let (_, _, hh, hw) = cache.head.input_dims();
        let mut d = self.head.input_grad(&d_out, hh, hw);
        let mut skip_grads = Vec::with_capacity(depth);
        for l in 0..depth - 1 {
            let (up_in, bc) = &cache.up[l];
            let lvl = &mut self.up[l];
            let d1 = lvl.blocks[1].backward(&bc[1], d, true).expect("input grad");
            let d0 = lvl.blocks[0].backward(&bc[0], d1, true).expect("input grad");
            let w = self.config.width(l);
            let (d_up, d_skip) = d0.split_channels(w);
            skip_grads.push(d_skip);
            d = lvl.upconv.backward(up_in, &d_up);
        }
        for l in (0..depth).rev() {
            if l + 1 < depth {
                let (idx, h, w) = &cache.pools[l];
                let mut dd = ops::maxpool2_backward(&d, idx, *h, *w);
                for (a, &b) in dd.data.iter_mut().zip(&skip_grads[l].data) {
                    *a += b;
                }
                d = dd;
            }
            let [b0, b1] = &mut self.down[l];
            let d1 = b1.backward(&cache.down[l][1], d, true).expect("input grad");
            match b0.backward(&cache.down[l][0], d1, l > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Sets every weight and bias of the final 1x1 convolution to zero.
    pub fn zero_head(&mut self) {
        self.head.params_mut().for_each(|p| p.value.fill(T::zero()));
    }

    /// Layer sequence in execution order.
    pub fn manifest(&self) -> Vec<LayerSpec> {
        generator_manifest(&self.config)
    }

    /// Named non-trainable buffers (batch-norm running statistics).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        for (name, bn) in self.batch_norms() {
            f(&format!("{name}.running_mean"), &bn.running_mean);
            f(&format!("{name}.running_var"), &bn.running_var);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        let names: Vec<String> = self.batch_norms().map(|(n, _)| n).collect();
        let bns = self
            .down
            .iter_mut()
            .flat_map(|b| b.iter_mut())
            .chain(self.up.iter_mut().flat_map(|u| u.blocks.iter_mut()))
            .map(|b| &mut b.bn);
        for (name, bn) in names.into_iter().zip(bns) {
            f(&format!("{name}.running_mean"), &mut bn.running_mean);
            f(&format!("{name}.running_var"), &mut bn.running_var);
        }
    }

    fn batch_norms(&self) -> impl Iterator<Item = (String, &BatchNorm2d<T>)> {
        self.down
            .iter()
            .flat_map(|b| b.iter())
            .chain(self.up.iter().flat_map(|u| u.blocks.iter()))
            .map(|b| (b.bn.gamma.name.trim_end_matches(".gamma").to_string(), &b.bn))
    }
}

impl<T: Real> Parameterized<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for lvl in &self.down {
            lvl.iter().for_each(|b| b.visit(f));
        }
        for lvl in &self.up {
            lvl.upconv.params().for_each(&mut *f);
            lvl.blocks.iter().for_each(|b| b.visit(f));
        }
        self.head.params().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for lvl in &mut self.down {
            lvl.iter_mut().for_each(|b| b.visit_mut(f));
        }
        for lvl in &mut self.up {
            lvl.upconv.params_mut().for_each(&mut *f);
            lvl.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        }
        self.head.params_mut().for_each(f);
    }
}

/// Forward pass in the mode the caller asks for; convenience over
/// [`Generator::predict`] and [`Generator::forward_train`].
pub fn generator_forward<T: Real>(
    g: &mut Generator<T>,
    x: &SliceBatch<T>,
    mode: Mode,
) -> Result<SliceBatch<T>, NetError> {
    match mode {
        Mode::Eval => g.predict(x),
        Mode::Train { update_stats: false } => g.forward_batch_stats(x),
        Mode::Train { update_stats: true } => g.forward_train(x, true).map(|(m, _)| m),
    }
}

pub fn generator_manifest(cfg: &GeneratorConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let (mut h, mut w) = cfg.input_size;
    let push_block = |out: &mut Vec<LayerSpec>, name: &str, cin: usize, cout: usize, hw: (usize, usize)| {
        out.push(LayerSpec::new(format!("{name}.conv"), LayerKind::Conv, cin, cout, hw).kernel(3, 1));
        out.push(LayerSpec::new(format!("{name}.bn"), LayerKind::BatchNorm, cout, cout, hw));
        out.push(LayerSpec::new(format!("{name}.relu"), LayerKind::Relu, cout, cout, hw));
    };
    for l in 0..cfg.depth {
        let cin = if l == 0 { 1 } else { cfg.width(l - 1) };
        let c = cfg.width(l);
        push_block(&mut out, &format!("down{l}.0"), cin, c, (h, w));
        push_block(&mut out, &format!("down{l}.1"), c, c, (h, w));
        if l + 1 < cfg.depth {
            h /= 2;
            w /= 2;
            out.push(LayerSpec::new(format!("down{l}.pool"), LayerKind::MaxPool, c, c, (h, w)).kernel(2, 2));
        }
    }
    for l in (0..cfg.depth - 1).rev() {
        let (c, c_below) = (cfg.width(l), cfg.width(l + 1));
        h *= 2;
        w *= 2;
        out.push(LayerSpec::new(format!("up{l}.upconv"), LayerKind::ConvTranspose, c_below, c, (h, w)).kernel(4, 2));
        out.push(LayerSpec::new(format!("up{l}.concat"), LayerKind::Concat, c, 2 * c, (h, w)));
        push_block(&mut out, &format!("up{l}.0"), 2 * c, c, (h, w));
        push_block(&mut out, &format!("up{l}.1"), c, c, (h, w));
    }
    out.push(LayerSpec::new("head", LayerKind::Conv, cfg.width(0), 1, (h, w)).kernel(1, 1));
    out
}

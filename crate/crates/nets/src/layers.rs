//! Parameterised layers built on the kernels in [`crate::ops`].

use rand::Rng;

use crate::ops::{self, BatchNormCache, Geometry, Unfolded};
use crate::param::Param;
use crate::scalar::Real;
use crate::tensor::Feat;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: Geometry,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, geom: Geometry, bias: bool, rng: &mut R) -> Self {
        let fan_in = in_ch * geom.k * geom.k;
        Self {
            weight: Param::kaiming_uniform(format!("{name}.weight"), &[out_ch, in_ch, geom.k, geom.k], fan_in, rng),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_ch])),
            in_ch,
            out_ch,
            geom,
        }
    }

    pub fn forward(&self, x: &Feat<T>) -> (Feat<T>, Unfolded<T>) {
        let u = Unfolded::new(x, self.geom);
        let y = self.forward_unfolded(&u, true);
        (y, u)
    }

    pub fn forward_unfolded(&self, u: &Unfolded<T>, with_bias: bool) -> Feat<T> {
        let bias = if with_bias { self.bias.as_ref().map(|b| b.value.as_slice()) } else { None };
        ops::conv2d_forward(u, &self.weight.value, bias, self.out_ch, self.geom)
    }

    /// Accumulate parameter gradients for `d_out`.
    pub fn accumulate_grads(&mut self, u: &Unfolded<T>, d_out: &Feat<T>) {
        ops::conv2d_weight_grad(u, d_out, &mut self.weight.grad, self.geom);
        if let Some(b) = &mut self.bias {
            ops::bias_grad(d_out, &mut b.grad);
        }
    }

    pub fn input_grad(&self, d_out: &Feat<T>, h: usize, w: usize) -> Feat<T> {
        ops::conv2d_input_grad(&self.weight.value, d_out, self.in_ch, h, w, self.geom)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Transposed convolution, weight laid out `(in_ch, out_ch, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: Geometry,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, geom: Geometry, rng: &mut R) -> Self {
        let fan_in = out_ch * geom.k * geom.k;
        Self {
            weight: Param::kaiming_uniform(format!("{name}.weight"), &[in_ch, out_ch, geom.k, geom.k], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            geom,
        }
    }

    pub fn forward(&self, x: &Feat<T>) -> Feat<T> {
        ops::conv_transpose_forward(x, &self.weight.value, Some(&self.bias.value), self.out_ch, self.geom)
    }

    pub fn backward(&mut self, x: &Feat<T>, d_out: &Feat<T>) -> Feat<T> {
        ops::bias_grad(d_out, &mut self.bias.grad);
        ops::conv_transpose_backward(x, &self.weight.value, d_out, &mut self.weight.grad, self.geom)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}

/// How batch norm layers normalise during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated only when asked.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[ch], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[ch]),
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_eval(&self, x: &Feat<T>) -> Feat<T> {
        ops::batchnorm_eval_forward(x, &self.gamma.value, &self.beta.value, &self.running_mean, &self.running_var, self.eps)
    }

    /// Normalise with the statistics of this batch, leaving running averages alone.
    pub fn forward_batch(&self, x: &Feat<T>) -> Feat<T> {
        ops::batchnorm_train_forward(x, &self.gamma.value, &self.beta.value, self.eps).0
    }

    pub fn forward_train(&mut self, x: &Feat<T>, update_stats: bool) -> (Feat<T>, BatchNormCache<T>) {
        let (y, cache) = ops::batchnorm_train_forward(x, &self.gamma.value, &self.beta.value, self.eps);
        if update_stats {
            let m = x.plane() as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for c in 0..x.c {
                let rm = self.running_mean[c].as_f64();
                let rv = self.running_var[c].as_f64();
                self.running_mean[c] = T::from_f64((1.0 - self.momentum) * rm + self.momentum * cache.mean[c]);
                self.running_var[c] = T::from_f64((1.0 - self.momentum) * rv + self.momentum * cache.var[c] * unbias);
            }
        }
        (y, cache)
    }

    pub fn backward(&mut self, d_y: &Feat<T>, cache: &BatchNormCache<T>) -> Feat<T> {
        ops::batchnorm_backward(d_y, cache, &self.gamma.value, &mut self.gamma.grad, &mut self.beta.grad)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.gamma, &self.beta].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.gamma, &mut self.beta].into_iter()
    }
}

//! Trainable parameters and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), value: vec![T::zero(); len], grad: vec![T::zero(); len] }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(name, shape);
        p.value.fill(v);
        p
    }

    /// Kaiming-uniform initialisation with ReLU gain: `U(-b, b)`, `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<R: Rng>(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.value {
            *v = T::from_f64(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns parameters.
pub trait Parameterized<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Flattened copy of every parameter value in visiting order.
    fn flat_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step
/// in parameter-visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<P: Parameterized<T> + ?Sized>(&mut self, model: &mut P) {
        self.steps += 1;
        let cfg = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let step_size = T::from_f64(cfg.learning_rate / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(cfg.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_params_mut(&mut |p| {
            if ms.len() <= k {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
            k += 1;
        });
    }
}

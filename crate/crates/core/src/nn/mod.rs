//! Hand-written layers with explicit backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward and consumes that cache on `backward`. Parameters carry a `frozen`
//! flag; frozen parameters never accumulate gradients and are skipped by the
//! optimizers.

mod conv;
mod linear;
mod mlp;
mod norm;
mod optim;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use mlp::{sigmoid, Mlp};
pub use norm::BatchNorm2d;
pub use optim::{Adam, Sgd};
pub use pool::MaxPool2d;

use rand::Rng;
use rand_distr::StandardNormal;

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param shape/value mismatch");
        Param {
            name: name.into(),
            shape,
            grad: vec![0.0; len],
            value,
            frozen: false,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    /// Kaiming-normal init with fan-out scaling (ReLU gain).
    pub fn kaiming_normal<R: Rng>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / fan_out as f64).sqrt();
        let len: usize = shape.iter().product();
        let value = (0..len)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Self::new(name, shape, value)
    }

    pub fn uniform<R: Rng>(name: impl Into<String>, shape: Vec<usize>, bound: f32, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let value = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

/// Anything that owns parameters in a fixed visiting order.
pub trait HasParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// In-place ReLU; returns the activity mask for the backward pass.
pub(crate) fn relu_inplace(data: &mut [f32], keep_mask: bool) -> Option<Vec<bool>> {
    if keep_mask {
        let mut mask = Vec::with_capacity(data.len());
        for v in data.iter_mut() {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            mask.push(on);
        }
        Some(mask)
    } else {
        for v in data.iter_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        None
    }
}

pub(crate) fn relu_backward(grad: &mut [f32], mask: &[bool]) {
    for (g, &on) in grad.iter_mut().zip(mask) {
        if !on {
            *g = 0.0;
        }
    }
}

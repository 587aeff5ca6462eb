use rand::Rng;

use super::Param;
use crate::tensor::sgemm;

/// Fully connected layer over row-major `n x in` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub fan_in: usize,
    pub fan_out: usize,
    cache: Option<Vec<f32>>,
}

impl Linear {
    /// PyTorch-style uniform init in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), vec![fan_out, fan_in], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![fan_out], bound, rng),
            fan_in,
            fan_out,
            cache: None,
        }
    }

    pub fn zeroed(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), vec![fan_out, fan_in]),
            bias: Param::zeros(format!("{name}.bias"), vec![fan_out]),
            fan_in,
            fan_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &[f32], n: usize, keep: bool) -> Vec<f32> {
        assert_eq!(x.len(), n * self.fan_in, "linear input width");
        let mut out = Vec::with_capacity(n * self.fan_out);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        sgemm(n, self.fan_in, self.fan_out, 1.0, x, false, &self.weight.value, true, 1.0, &mut out);
        self.cache = keep.then(|| x.to_vec());
        out
    }

    pub fn backward(&mut self, dy: &[f32], n: usize, need_dx: bool) -> Option<Vec<f32>> {
        let x = self
            .cache
            .take()
            .expect("linear backward without a cached training forward");
        if !self.weight.frozen {
            sgemm(self.fan_out, n, self.fan_in, 1.0, dy, true, &x, false, 1.0, &mut self.weight.grad);
        }
        if !self.bias.frozen {
            for row in dy.chunks(self.fan_out) {
                for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; n * self.fan_in];
            sgemm(n, self.fan_out, self.fan_in, 1.0, dy, false, &self.weight.value, false, 0.0, &mut dx);
            dx
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

use super::{Buffer, Param};
use crate::tensor::Act;

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

/// Batch normalization over the channel axis.
///
/// In training mode the batch statistics normalize the input and the running
/// statistics are updated. A frozen layer (frozen affine parameters) always
/// normalizes with its running statistics and never updates them, so frozen
/// regions of a network keep the exact behaviour they had when frozen.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(format!("{name}.weight"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.bias"), vec![channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![1.0; channels],
            },
            cache: None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.gamma.frozen && self.beta.frozen
    }

    pub fn forward(&mut self, x: &Act, train: bool) -> Act {
        let channels = self.gamma.numel();
        assert_eq!(x.c, channels, "batch norm channels");
        let batch_stats = train && !self.is_frozen();
        let m = x.n * x.plane();
        let mut out = x.clone();
        let mut xhat_all = if train { Vec::with_capacity(x.data.len()) } else { Vec::new() };
        let mut inv_stds = Vec::with_capacity(channels);
        for c in 0..channels {
            let src = x.channel(c);
            let (mean, var) = if batch_stats {
                let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let rm = &mut self.running_mean.value[c];
                *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean as f32;
                let rv = &mut self.running_var.value[c];
                *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean.value[c], self.running_var.value[c])
            };
            let inv_std = 1.0 / (var + EPS).sqrt();
            inv_stds.push(inv_std);
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let dst = out.channel_mut(c);
            for v in dst.iter_mut() {
                let xh = (*v - mean) * inv_std;
                if train {
                    xhat_all.push(xh);
                }
                *v = g * xh + b;
            }
        }
        self.cache = if train {
            Some(NormCache {
                xhat: xhat_all,
                inv_std: inv_stds,
                batch_stats,
            })
        } else {
            None
        };
        out
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let cache = self
            .cache
            .take()
            .expect("batch norm backward without a cached training forward");
        let channels = self.gamma.numel();
        let m = dy.n * dy.plane();
        let mut dx = dy.clone();
        for c in 0..channels {
            let g_out = dy.channel(c);
            let xhat = &cache.xhat[c * m..(c + 1) * m];
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (&g, &xh) in g_out.iter().zip(xhat) {
                sum_dy += g as f64;
                sum_dy_xhat += (g * xh) as f64;
            }
            if !self.gamma.frozen {
                self.gamma.grad[c] += sum_dy_xhat as f32;
            }
            if !self.beta.frozen {
                self.beta.grad[c] += sum_dy as f32;
            }
            let gamma = self.gamma.value[c];
            let inv_std = cache.inv_std[c];
            let dst = dx.channel_mut(c);
            if cache.batch_stats {
                let mf = m as f32;
                let mean_dy = sum_dy as f32 / mf;
                let mean_dy_xhat = sum_dy_xhat as f32 / mf;
                for (d, &xh) in dst.iter_mut().zip(xhat) {
                    *d = gamma * inv_std * (*d - mean_dy - xh * mean_dy_xhat);
                }
            } else {
                for d in dst.iter_mut() {
                    *d *= gamma * inv_std;
                }
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(bn: &mut BatchNorm2d, x: &Act, r: &[f32]) -> f64 {
        // batch statistics without touching the running buffers
        let saved = (bn.running_mean.clone(), bn.running_var.clone());
        let y = bn.forward(x, true);
        bn.clear_cache();
        bn.running_mean = saved.0;
        bn.running_var = saved.1;
        y.data.iter().zip(r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn training_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let mut x = Act::zeros(3, 4, 2, 2);
        x.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        let r: Vec<f32> = (0..x.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bn.forward(&x, true);
        let dy = Act { data: r.clone(), ..x.clone() };
        let dx = bn.backward(&dy);
        let eps = 1e-3;
        for idx in [0usize, 5, 17, 47] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (loss(&mut bn, &xp, &r) - loss(&mut bn, &xm, &r)) / (2.0 * eps as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 2e-2, "{fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn frozen_layer_uses_and_keeps_running_statistics() {
        let mut bn = BatchNorm2d::new("bn", 1);
        bn.running_mean.value = vec![2.0];
        bn.running_var.value = vec![4.0];
        bn.gamma.frozen = true;
        bn.beta.frozen = true;
        let x = Act { c: 1, n: 2, h: 1, w: 1, data: vec![2.0, 4.0] };
        let y = bn.forward(&x, true);
        assert!((y.data[0]).abs() < 1e-6);
        assert!((y.data[1] - 2.0 / (4.0f32 + EPS).sqrt()).abs() < 1e-6);
        assert_eq!(bn.running_mean.value, vec![2.0]);
        assert_eq!(bn.running_var.value, vec![4.0]);
        let dx = bn.backward(&Act { data: vec![1.0, 1.0], ..x });
        assert!(bn.gamma.grad.iter().all(|&g| g == 0.0));
        assert!((dx.data[0] - 1.0 / (4.0f32 + EPS).sqrt()).abs() < 1e-6);
    }
}

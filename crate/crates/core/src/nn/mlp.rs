use rand::Rng;

use super::{relu_backward, relu_inplace, HasParams, Linear, Param};

/// Fully connected ReLU network with a single logit output.
///
/// The output layer starts at zero, so an untrained network emits the
/// constant logit 0 (probability 0.5) for every input.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    masks: Vec<Vec<bool>>,
}

impl Mlp {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push(Linear::new(&format!("{name}.fc{}", i + 1), fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Linear::zeroed(&format!("{name}.out"), fan_in, 1));
        Mlp {
            layers,
            masks: Vec::new(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    /// Output logits, one per input row.
    pub fn forward(&mut self, x: &[f32], n: usize, keep: bool) -> Vec<f32> {
        self.masks.clear();
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, n, keep);
            if i < last {
                if let Some(mask) = relu_inplace(&mut h, keep) {
                    self.masks.push(mask);
                }
            }
        }
        h
    }

    /// Backpropagates `d loss / d logit`; returns the input gradient when asked.
    pub fn backward(&mut self, dlogits: &[f32], n: usize, need_dx: bool) -> Option<Vec<f32>> {
        let mut g = dlogits.to_vec();
        let count = self.layers.len();
        for i in (0..count).rev() {
            let want_dx = i > 0 || need_dx;
            let dx = self.layers[i].backward(&g, n, want_dx);
            match dx {
                Some(mut d) if i > 0 => {
                    relu_backward(&mut d, &self.masks[i - 1]);
                    g = d;
                }
                other => return other,
            }
        }
        None
    }

    pub fn clear_cache(&mut self) {
        self.masks.clear();
        self.layers.iter_mut().for_each(Linear::clear_cache);
    }
}

impl HasParams for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for l in &self.layers {
            f(&l.weight);
            f(&l.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            f(&mut l.weight);
            f(&mut l.bias);
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn untrained_output_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new("a", 4, &[8, 8], &mut rng);
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert!(mlp.forward(&x, 3, false).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new("a", 3, &[5], &mut rng);
        mlp.visit_params_mut(&mut |p| {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        });
        let x = vec![0.3, -0.2, 0.9, 0.1, 0.4, -0.7];
        mlp.forward(&x, 2, true);
        let dx = mlp.backward(&[1.0, -2.0], 2, true).unwrap();
        let f = |m: &mut Mlp, x: &[f32]| {
            let y = m.forward(x, 2, false);
            (y[0] - 2.0 * y[1]) as f64
        };
        let eps = 1e-3;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (f(&mut mlp, &xp) - f(&mut mlp, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3, "{fd} vs {}", dx[i]);
        }
    }
}

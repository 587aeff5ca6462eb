use super::{HasParams, Param};

/// SGD with heavy-ball momentum and coupled L2 weight decay (PyTorch
/// semantics). Frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: HasParams + ?Sized>(&mut self, model: &mut M) {
        let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut slot = 0;
        model.visit_params_mut(&mut |p: &mut Param| {
            if velocity.len() <= slot {
                velocity.push(vec![0.0; p.numel()]);
            }
            if !p.frozen {
                let v = &mut velocity[slot];
                for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                    let d = *g + wd * *w;
                    *vi = mom * *vi + d;
                    *w -= lr * *vi;
                }
            }
            slot += 1;
        });
    }
}

/// Adam, used for the small attack networks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: HasParams + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut slot = 0;
        model.visit_params_mut(&mut |p: &mut Param| {
            if ms.len() <= slot {
                ms.push(vec![0.0; p.numel()]);
                vs.push(vec![0.0; p.numel()]);
            }
            if !p.frozen {
                for (((w, &g), m), v) in p
                    .value
                    .iter_mut()
                    .zip(&p.grad)
                    .zip(ms[slot].iter_mut())
                    .zip(vs[slot].iter_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            slot += 1;
        });
    }
}

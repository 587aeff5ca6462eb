use crate::tensor::Act;

/// Max pooling with square window; ties resolve to the first maximum.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, usize, usize, usize, usize)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Act, keep: bool) -> Act {
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut out = Act::zeros(x.c, x.n, ho, wo);
        let mut argmax = if keep { Vec::with_capacity(out.data.len()) } else { Vec::new() };
        let plane = x.plane();
        for cn in 0..x.c * x.n {
            let base = cn * plane;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * x.w + ix as usize;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data[(cn * ho + oy) * wo + ox] = best;
                    if keep {
                        argmax.push(best_idx);
                    }
                }
            }
        }
        self.cache = keep.then_some((argmax, x.c, x.n, x.h, x.w));
        out
    }

    pub fn backward(&mut self, dy: &Act) -> Act {
        let (argmax, c, n, h, w) = self
            .cache
            .take()
            .expect("max pool backward without a cached training forward");
        let mut dx = Act::zeros(c, n, h, w);
        for (&src, &g) in argmax.iter().zip(&dy.data) {
            dx.data[src] += g;
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

    #[test]
    fn picks_window_maximum_and_routes_gradient() {
        let x = Act {
            c: 1,
            n: 1,
            h: 2,
            w: 2,
            data: vec![1.0, 3.0, 2.0, 0.0],
        };
        let mut pool = MaxPool2d::new(2, 2, 0);
        let y = pool.forward(&x, true);
        assert_eq!(y.data, vec![3.0]);
        let dx = pool.backward(&Act { data: vec![5.0], ..y });
        assert_eq!(dx.data, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_window_shape() {
        let pool = MaxPool2d::new(3, 2, 1);
        assert_eq!(pool.out_dims(16, 16), (8, 8));
    }
}

use rand::Rng;

use super::Param;
use crate::tensor::{sgemm, Act};

/// Square-kernel 2-D convolution without bias, lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f32>,
    n: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_out = cout * kernel * kernel;
        Conv2d {
            weight: Param::kaiming_normal(
                format!("{name}.weight"),
                vec![cout, cin, kernel, kernel],
                fan_out,
                rng,
            ),
            cin,
            cout,
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

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&mut self, x: &Act, keep: bool) -> Act {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(x.h, x.w);
        let rows = self.cin * self.kernel * self.kernel;
        let cols_n = x.n * ho * wo;
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            im2col(x, self.kernel, self.stride, self.pad, ho, wo)
        };
        let mut out = Act::zeros(self.cout, x.n, ho, wo);
        sgemm(
            self.cout,
            rows,
            cols_n,
            1.0,
            &self.weight.value,
            false,
            &cols,
            false,
            0.0,
            &mut out.data,
        );
        self.cache = if keep {
            Some(ConvCache {
                cols,
                n: x.n,
                h: x.h,
                w: x.w,
            })
        } else {
            None
        };
        out
    }

    /// Accumulates the weight gradient (unless frozen) and, if requested,
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, dy: &Act, need_dx: bool) -> Option<Act> {
        let cache = self
            .cache
            .take()
            .expect("conv backward without a cached training forward");
        let rows = self.cin * self.kernel * self.kernel;
        let cols_n = dy.n * dy.h * dy.w;
        if !self.weight.frozen {
            sgemm(
                self.cout,
                cols_n,
                rows,
                1.0,
                &dy.data,
                false,
                &cache.cols,
                true,
                1.0,
                &mut self.weight.grad,
            );
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; rows * cols_n];
        sgemm(
            rows,
            self.cout,
            cols_n,
            1.0,
            &self.weight.value,
            true,
            &dy.data,
            false,
            0.0,
            &mut dcols,
        );
        if self.is_pointwise() {
            return Some(Act {
                c: self.cin,
                n: cache.n,
                h: cache.h,
                w: cache.w,
                data: dcols,
            });
        }
        let mut dx = Act::zeros(self.cin, cache.n, cache.h, cache.w);
        col2im(&dcols, &mut dx, self.kernel, self.stride, self.pad, dy.h, dy.w);
        Some(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

fn im2col(x: &Act, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f32> {
    let cols_n = x.n * ho * wo;
    let mut cols = vec![0.0f32; x.c * k * k * cols_n];
    let (h, w) = (x.h as isize, x.w as isize);
    let plane = x.h * x.w;
    for ci in 0..x.c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let row = &mut cols[r * cols_n..(r + 1) * cols_n];
                for i in 0..x.n {
                    let src = &x.data[(ci * x.n + i) * plane..(ci * x.n + i + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + kh) as isize - p as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut row[(i * ho + oy) * wo..(i * ho + oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kw) as isize - p as isize;
                            if ix >= 0 && ix < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], dx: &mut Act, k: usize, s: usize, p: usize, ho: usize, wo: usize) {
    let cols_n = dx.n * ho * wo;
    let (h, w) = (dx.h as isize, dx.w as isize);
    let plane = dx.h * dx.w;
    let (n, width) = (dx.n, dx.w);
    for ci in 0..dx.c {
        for kh in 0..k {
            for kw in 0..k {
                let r = (ci * k + kh) * k + kw;
                let row = &dcols[r * cols_n..(r + 1) * cols_n];
                for i in 0..n {
                    let dst = &mut dx.data[(ci * n + i) * plane..(ci * n + i + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + kh) as isize - p as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * width..(iy as usize + 1) * width];
                        let src = &row[(i * ho + oy) * wo..(i * ho + oy + 1) * wo];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * s + kw) as isize - p as isize;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

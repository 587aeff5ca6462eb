//! Dense activation storage and the matrix kernels the layers are built on.
//!
//! Activations inside the network use a channel-major `C x N x H x W` layout
//! so that a convolution over a whole batch is a single GEMM and per-channel
//! reductions (batch norm) walk contiguous memory.

/// Channel-major activation block: `data[((c * n + i) * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Converts a row-major `N x C x H x W` buffer into channel-major layout.
    pub fn from_nchw(n: usize, c: usize, h: usize, w: usize, nchw: &[f32]) -> Self {
        assert_eq!(nchw.len(), n * c * h * w);
        let hw = h * w;
        let mut data = vec![0.0; nchw.len()];
        for i in 0..n {
            for ch in 0..c {
                let src = &nchw[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                data[(ch * n + i) * hw..(ch * n + i + 1) * hw].copy_from_slice(src);
            }
        }
        Act { c, n, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Per-channel slice covering the whole batch.
    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.n * self.plane();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let len = self.n * self.plane();
        &mut self.data[c * len..(c + 1) * len]
    }

    /// Flattened `C*H*W` feature vector of one sample, in `(c, y, x)` order.
    pub fn sample_vector(&self, i: usize) -> Vec<f32> {
        let hw = self.plane();
        let mut out = Vec::with_capacity(self.c * hw);
        for ch in 0..self.c {
            let start = (ch * self.n + i) * hw;
            out.extend_from_slice(&self.data[start..start + hw]);
        }
        out
    }

    /// Per-sample flattened feature vectors, `n` rows of `C*H*W`.
    pub fn to_sample_rows(&self) -> Vec<Vec<f32>> {
        (0..self.n).map(|i| self.sample_vector(i)).collect()
    }

    pub fn same_shape(&self, other: &Act) -> bool {
        self.c == other.c && self.n == other.n && self.h == other.h && self.w == other.w
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` over row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`
/// when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe exactly the
    // row-major (optionally transposed) views of those buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable row-wise softmax of an `n x classes` logit matrix.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Row-wise `log_softmax`.
pub fn log_softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        for &ta in &[false, true] {
            for &tb in &[false, true] {
                let mut c = vec![0.0; m * n];
                sgemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn layout_round_trip() {
        let (n, c, h, w) = (2, 3, 2, 2);
        let nchw: Vec<f32> = (0..n * c * h * w).map(|v| v as f32).collect();
        let act = Act::from_nchw(n, c, h, w, &nchw);
        let row1 = act.sample_vector(1);
        assert_eq!(row1, nchw[12..24].to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = [1.0, 2.0, 3.0, -50.0, 0.0, 50.0];
        let p = softmax_rows(&logits, 3);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

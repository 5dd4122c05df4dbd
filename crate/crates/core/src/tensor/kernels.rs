//! Raw slice kernels behind the tape ops. Layouts are NCHW, row-major.

/// `c = a · b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`, with
/// arbitrary strides supplied by the caller for transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller guarantees the slices cover every index reachable
    // through the given dimensions and strides; `c` is row-major m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one sample `x: [c_in, h, w]` into `cols: [c_in·kh·kw, h_out·w_out]`.
pub(crate) fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= g.w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `dx: [c_in, h, w]`.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[ih as usize * g.w + iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.batch * g.c_out * p];
    let mut cols = vec![0.0; k * p];
    let in_len = g.c_in * g.h * g.w;
    for n in 0..g.batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * g.c_out * p..(n + 1) * g.c_out * p];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(b[co]);
        }
        gemm(g.c_out, k, p, w, (k as isize, 1), &cols, (p as isize, 1), dst, true);
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(g: &ConvGeometry, x: &[f64], w: &[f64], dout: &[f64], want: (bool, bool, bool)) -> ConvGrads {
    let (k, p) = (g.patch_len(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut dx = want.0.then(|| vec![0.0; g.batch * in_len]);
    let mut dw = want.1.then(|| vec![0.0; g.c_out * k]);
    let mut db = want.2.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        let dout_n = &dout[n * g.c_out * p..(n + 1) * g.c_out * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in dout_n.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            // dW += dout_n (c_out×p) · colsᵀ (p×k)
            gemm(g.c_out, p, k, dout_n, (p as isize, 1), &cols, (1, p as isize), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ (k×c_out) · dout_n (c_out×p)
            gemm(k, g.c_out, p, w, (1, k as isize), dout_n, (p as isize, 1), &mut cols, false);
            col2im(g, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Per-channel batch statistics cached by the BN forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm over `[batch, channels, spatial]`, population variance.
pub(crate) fn batchnorm_forward(shape: (usize, usize, usize), x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, BnCache) {
    let (batch, channels, spatial) = shape;
    let m = (batch * spatial) as f64;
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let planes = || (0..batch).map(move |n| (n * channels + c) * spatial);
        let mut mean = 0.0;
        for s in planes() {
            mean += x[s..s + spatial].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for s in planes() {
            var += x[s..s + spatial].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= m;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[c] = istd;
        for s in planes() {
            for i in s..s + spatial {
                let xh = (x[i] - mean) * istd;
                x_hat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (out, BnCache { x_hat, inv_std })
}

pub(crate) fn batchnorm_backward(
    shape: (usize, usize, usize),
    cache: &BnCache,
    gamma: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (batch, channels, spatial) = shape;
    let m = (batch * spatial) as f64;
    let mut dx = vec![0.0; dout.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let planes = || (0..batch).map(move |n| (n * channels + c) * spatial);
        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
        for s in planes() {
            for i in s..s + spatial {
                sum_d += dout[i];
                sum_dx += dout[i] * cache.x_hat[i];
            }
        }
        dgamma[c] = sum_dx;
        dbeta[c] = sum_d;
        // dx = γ·istd/m · (m·dout − Σdout − x̂·Σ(dout·x̂))
        let scale = gamma[c] * cache.inv_std[c] / m;
        for s in planes() {
            for i in s..s + spatial {
                dx[i] = scale * (m * dout[i] - sum_d - cache.x_hat[i] * sum_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2×2 stride-2 max pooling over `[planes, h, w]`; returns values and the
/// flat input index that won each window (first maximum in row-major order).
pub(crate) fn maxpool2x2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let expect: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let (out, arg) = maxpool2x2_forward(1, 2, 2, &x);
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_drops_odd_edge() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (out, arg) = maxpool2x2_forward(1, 3, 3, &x);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![4]);
    }
}

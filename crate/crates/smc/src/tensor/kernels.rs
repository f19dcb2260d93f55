//! Plain-value compute kernels shared by the tape forward and backward paths.

use super::Elem;

/// `C <- alpha * op(A) @ op(B) + beta * C` for row-major buffers.
///
/// `at`/`bt` select a transposed view without materializing it; the logical
/// dimensions `m, k, n` always refer to the product `(m x k) @ (k x n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    at: bool,
    b: &[E],
    bt: bool,
    beta: E,
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
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

/// Triple-loop reference matmul, kept as an independent oracle for the fast
/// path in tests.
pub fn matmul_naive<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E]) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

/// Output spatial extent of a stride-1 convolution with symmetric zero padding.
pub fn conv_out_extent(input: usize, kernel: usize, pad: usize) -> usize {
    input + 2 * pad + 1 - kernel
}

/// Lower one sample `(c, h, w)` into a column matrix `(c*kh*kw, ho*wo)`.
pub fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [E],
) {
    let ho = conv_out_extent(h, kh, pad);
    let wo = conv_out_extent(w, kw, pad);
    debug_assert_eq!(out.len(), c * kh * kw * ho * wo);
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    let dst = &mut out[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto one sample's input gradient.
pub fn col2im_add<E: Elem>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    dx: &mut [E],
) {
    let ho = conv_out_extent(h, kh, pad);
    let wo = conv_out_extent(w, kw, pad);
    debug_assert_eq!(col.len(), c * kh * kw * ho * wo);
    let cols = ho * wo;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * cols;
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * wo..row + (oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2/stride-2 max pooling over one `(c, h, w)` sample; odd trailing rows or
/// columns are dropped. Ties resolve to the lowest flat index.
pub fn maxpool2<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [E],
    argmax: &mut [u32],
) {
    let ho = h / 2;
    let wo = w / 2;
    debug_assert_eq!(out.len(), c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * 2) * w + ox * 2;
                let idx = [base, base + 1, base + w, base + w + 1];
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                out[o] = plane[best];
                argmax[o] = (ch * h * w + best) as u32;
            }
        }
    }
}

/// Row-wise log-softmax with max-subtraction stabilization.
pub fn log_softmax_rows<E: Elem>(x: &[E], cols: usize, out: &mut [E]) {
    debug_assert_eq!(x.len() % cols, 0);
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maximum(v);
        }
        let mut sum = E::ZERO;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
}

/// Row-wise softmax of `logits / tau`, max-stabilized.
pub fn softmax_rows_with_temperature<E: Elem>(x: &[E], cols: usize, tau: f64, out: &mut [E]) {
    let inv_tau = E::from_f64(1.0 / tau);
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut m = row[0] * inv_tau;
        for &v in &row[1..] {
            m = m.maximum(v * inv_tau);
        }
        let mut sum = E::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v * inv_tau - m).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.31 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.17 + 1.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
        let want = matmul_naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_views() {
        // A stored as (k x m) row-major, used as A^T.
        let (m, k, n) = (3, 4, 2);
        let a_t: Vec<f64> = (0..k * m).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) - 3.0).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = a_t[p * m + i];
            }
        }
        let want = matmul_naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a_t, true, &b, false, 0.0, &mut c);
        assert_eq!(c, want);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> makes the pair each other's adjoint.
        let (c, h, w, kh, kw, pad) = (2, 5, 4, 3, 3, 1);
        let ho = conv_out_extent(h, kh, pad);
        let wo = conv_out_extent(w, kw, pad);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64) * 0.5 - 7.0).collect();
        let y: Vec<f64> = (0..c * kh * kw * ho * wo)
            .map(|i| ((i * 37 % 11) as f64) - 5.0)
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, pad, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, c, h, w, kh, kw, pad, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_tie_breaks_to_lowest_index() {
        let x = vec![1.0f64, 1.0, 1.0, 1.0];
        let mut out = vec![0.0; 1];
        let mut arg = vec![0u32; 1];
        maxpool2(&x, 1, 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 1.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let x = vec![0.0f64, 0.0];
        let mut out = vec![0.0; 2];
        log_softmax_rows(&x, 2, &mut out);
        let ln2 = 2.0f64.ln();
        assert!((out[0] + ln2).abs() < 1e-15);
        assert!((out[1] + ln2).abs() < 1e-15);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let x = vec![10.0f64, 0.0];
        let mut out = vec![0.0; 2];
        softmax_rows_with_temperature(&x, 2, 1e6, &mut out);
        assert!((out[0] - 0.5).abs() < 1e-5);
        assert!((out[1] - 0.5).abs() < 1e-5);
    }
}

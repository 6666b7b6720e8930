//! Raw slice kernels behind the differentiable ops. Inner loops are written
//! as contiguous zips so they vectorize; summation order is fixed so results
//! are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let mut tail = T::ZERO;
    for &x in rest {
        tail += x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `[m, k] x [k, n] -> [m, n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

/// Gradients of `matmul` given the upstream gradient `g` of shape `[m, n]`.
pub(crate) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::ZERO; m * k];
    let mut gb = vec![T::ZERO; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
            axpy(a[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
        }
    }
    (ga, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output positions `t` whose tap `k` lands inside the unpadded input,
    /// as a half-open range. Only meaningful for stride 1.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (self.len_in + self.padding)
            .saturating_sub(k)
            .min(self.len_out);
        (lo, hi.max(lo))
    }

    #[inline]
    fn source_index(&self, t: usize, k: usize) -> Option<usize> {
        let idx = t * self.stride + k;
        (idx >= self.padding && idx - self.padding < self.len_in).then(|| idx - self.padding)
    }
}

const MR: usize = 4;
const NR: usize = 16;

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
cpufeatures::new!(has_avx2, "avx2");

/// `c[m, n] += a[m, k] * b[k, n]`, register-blocked in `MR x NR` tiles. Each
/// output accumulates over `p` in increasing order, so the wide and the
/// baseline code paths produce identical bits.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    if has_avx2::get() {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_body(a, b, c, m, k, n)
}

#[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_body(a, b, c, m, k, n)
}

#[inline(always)]
fn gemm_body<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if k == 0 {
        return;
    }
    let mut i0 = 0;
    while i0 < m {
        let rows = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let cols = NR.min(n - j0);
            if rows == MR && cols == NR {
                let ar: [&[T]; MR] = core::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
                let mut acc = [[T::ZERO; NR]; MR];
                for (p, brow) in b[j0..].chunks(n).take(k).enumerate() {
                    let bv: &[T; NR] = brow[..NR].try_into().unwrap();
                    for r in 0..MR {
                        let av = ar[r][p];
                        for l in 0..NR {
                            acc[r][l] += av * bv[l];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let crow: &mut [T; NR] = (&mut c[(i0 + r) * n + j0..][..NR]).try_into().unwrap();
                    for l in 0..NR {
                        crow[l] += accr[l];
                    }
                }
            } else {
                for r in 0..rows {
                    let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                    let mut acc = [T::ZERO; NR];
                    for (brow, &av) in b[j0..].chunks(n).zip(arow) {
                        for (x, &bv) in acc.iter_mut().zip(&brow[..cols]) {
                            *x += av * bv;
                        }
                    }
                    for (o, x) in c[(i0 + r) * n + j0..][..cols].iter_mut().zip(acc) {
                        *o += x;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Unfolds one batch item `[in_ch, len_in]` into `[in_ch * kernel, len_out]`
/// with zeros at padded positions.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    for i in 0..g.in_ch {
        let xrow = &x[i * g.len_in..(i + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &mut col[(i * g.kernel + k) * g.len_out..][..g.len_out];
            if g.stride == 1 {
                let (lo, hi) = g.valid_range(k);
                row[..lo].fill(T::ZERO);
                row[hi..].fill(T::ZERO);
                if lo < hi {
                    let off = lo + k - g.padding;
                    row[lo..hi].copy_from_slice(&xrow[off..off + (hi - lo)]);
                }
            } else {
                for (t, r) in row.iter_mut().enumerate() {
                    *r = g.source_index(t, k).map_or(T::ZERO, |s| xrow[s]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients into `gx`.
fn col2im_acc<T: Real>(gcol: &[T], g: &ConvGeom, gx: &mut [T]) {
    for i in 0..g.in_ch {
        let gxrow = &mut gx[i * g.len_in..(i + 1) * g.len_in];
        for k in 0..g.kernel {
            let row = &gcol[(i * g.kernel + k) * g.len_out..][..g.len_out];
            if g.stride == 1 {
                let (lo, hi) = g.valid_range(k);
                if lo < hi {
                    let off = lo + k - g.padding;
                    for (o, &v) in gxrow[off..off + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                        *o += v;
                    }
                }
            } else {
                for (t, &v) in row.iter().enumerate() {
                    if let Some(s) = g.source_index(t, k) {
                        gxrow[s] += v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation: `out[b,o,t] = bias[o] + sum_{i,k} w[o,i,k] x[b,i,t*s+k-p]`.
pub(crate) fn conv1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.in_ch * g.kernel;
    let mut out = vec![T::ZERO; g.batch * g.out_ch * g.len_out];
    let mut col = vec![T::ZERO; p * g.len_out];
    for b in 0..g.batch {
        im2col(&x[b * g.in_ch * g.len_in..][..g.in_ch * g.len_in], g, &mut col);
        let ob = &mut out[b * g.out_ch * g.len_out..][..g.out_ch * g.len_out];
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_exact_mut(g.len_out).enumerate() {
                row.fill(bias[o]);
            }
        }
        gemm_acc(w, &col, ob, g.out_ch, p, g.len_out);
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the input or the
/// weight/bias gradients are left empty when not requested.
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.in_ch * g.kernel;
    let (mut gx, mut gw, mut gb) = (Vec::new(), Vec::new(), Vec::new());
    let mut col = Vec::new();
    let mut gcol = Vec::new();
    let mut wt = Vec::new();
    if need_w {
        gw = vec![T::ZERO; w.len()];
        gb = vec![T::ZERO; g.out_ch];
        col = vec![T::ZERO; p * g.len_out];
    }
    if need_x {
        gx = vec![T::ZERO; x.len()];
        gcol = vec![T::ZERO; p * g.len_out];
        wt = transpose(w, g.out_ch, p);
    }
    for b in 0..g.batch {
        let gbatch = &grad[b * g.out_ch * g.len_out..][..g.out_ch * g.len_out];
        if need_w {
            for (o, row) in gbatch.chunks_exact(g.len_out).enumerate() {
                gb[o] += sum(row);
            }
            im2col(&x[b * g.in_ch * g.len_in..][..g.in_ch * g.len_in], g, &mut col);
            let colt = transpose(&col, p, g.len_out);
            gemm_acc(gbatch, &colt, &mut gw, g.out_ch, g.len_out, p);
        }
        if need_x {
            gcol.fill(T::ZERO);
            gemm_acc(&wt, gbatch, &mut gcol, p, g.out_ch, g.len_out);
            col2im_acc(&gcol, g, &mut gx[b * g.in_ch * g.len_in..][..g.in_ch * g.len_in]);
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
        assert_eq!(sum(&a), a.iter().sum::<f64>());
    }

    #[test]
    fn strided_and_unit_stride_paths_agree_on_overlap() {
        // With stride 1 both branches must produce the same thing; force the
        // generic branch by comparing against a direct evaluation.
        let g = ConvGeom {
            batch: 1,
            in_ch: 2,
            out_ch: 1,
            len_in: 6,
            len_out: 6,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let w = [1.0, -2.0, 0.5, 0.25, 1.0, -1.0];
        let out = conv1d_forward(&x, &w, Some(&[0.5]), &g);
        for (t, &got) in out.iter().enumerate() {
            let mut expect = 0.5;
            for i in 0..2 {
                for k in 0..3 {
                    let idx = t as isize + k as isize - 1;
                    if (0..6).contains(&idx) {
                        expect += w[i * 3 + k] * x[i * 6 + idx as usize];
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }
}

//! Slice-level numeric kernels shared by the differentiable graph and the
//! graph-free inference path. All matrices are dense row-major.
//!
//! The reduction kernels accumulate into a fixed number of lanes so the
//! compiler can vectorize them; the summation order is fixed, which keeps
//! results bitwise reproducible run to run.

use super::Scalar;

const LANES: usize = 8;
/// Rows and columns of one register tile of the row-major matrix kernels.
const MR: usize = 4;
const NR: usize = 32;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..c * LANES + LANES];
        let xb = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    reduce_lanes(&acc, tail)
}

/// Dot product accumulated strictly left to right with fused
/// multiply-adds; equals one element of a [`gemm_nn`] product into zeros.
#[inline]
pub fn dot_seq<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = x.mul_add(y, acc);
    }
    acc
}

#[inline(always)]
fn reduce_lanes<S: Scalar>(acc: &[S; LANES], tail: S) -> S {
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// y += alpha * x
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(xi, *yi);
    }
}

#[inline(always)]
fn tile_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[S::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    for p in 0..k {
        let brow: &[S; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
        for (r, row) in acc.iter_mut().enumerate() {
            let ar = a[(i + r) * k + p];
            for l in 0..NR {
                row[l] = ar.mul_add(brow[l], row[l]);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

/// c[m×n] += a[m×k] · b[k×n]. Every output element accumulates its k
/// products in ascending order with fused multiply-adds, whatever the tiling.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            tile_nn(a, b, c, i, j, k, n);
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                for p in 0..k {
                    let arp = a[r * k + p];
                    axpy(arp, &b[p * n + j..(p + 1) * n], &mut c[r * n + j..(r + 1) * n]);
                }
            }
        }
        i += MR;
    }
    for r in i..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for p in 0..k {
            axpy(a[r * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ, with the same per-element accumulation
/// order as [`gemm_nn`] (see [`dot_seq`]).
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Row-major transpose of `a[m×k]` into `[k×m]`.
pub fn transpose<S: Scalar>(a: &[S], m: usize, k: usize) -> Vec<S> {
    let mut t = vec![S::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            t[p * m + i] = a[i * k + p];
        }
    }
    t
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(a, m, k);
    gemm_nn(&at, b, c, k, m, n);
}

/// Row softmax in place. `mask[j] == false` positions are treated as −∞ and
/// come out exactly zero. Returns `false` if every position is masked.
pub fn softmax_row<S: Scalar>(row: &mut [S], mask: Option<&[bool]>) -> bool {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        return false;
    }
    let mut sum = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = S::zero();
        }
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// Inverse RMS of a row: 1 / sqrt(mean(x²) + eps).
#[inline]
pub fn inv_rms<S: Scalar>(row: &[S], eps: S) -> S {
    let ms = dot(row, row) / S::from_usize(row.len()).unwrap();
    S::one() / (ms + eps).sqrt()
}

pub fn rms_norm_row<S: Scalar>(row: &[S], weight: &[S], eps: S, out: &mut [S]) -> S {
    let r = inv_rms(row, eps);
    for ((o, &x), &w) in out.iter_mut().zip(row).zip(weight) {
        *o = x * r * w;
    }
    r
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Rotary frequencies for one head: θ_i = base^(−2i/head_dim), i < head_dim/2.
pub fn rope_freqs(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotary angles for one head size, with cos/sin precomputed for the
/// first `cached` positions. Later positions are computed on demand with
/// the same formula.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    head_dim: usize,
    freqs: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64, cached: usize) -> Self {
        let freqs = rope_freqs(head_dim, base);
        let half = freqs.len();
        let mut cos = Vec::with_capacity(cached * half);
        let mut sin = Vec::with_capacity(cached * half);
        for p in 0..cached {
            for &f in &freqs {
                let (s, c) = (p as f64 * f).sin_cos();
                sin.push(s);
                cos.push(c);
            }
        }
        RopeTable { head_dim, freqs, cos, sin }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    #[inline]
    fn sin_cos(&self, position: usize, i: usize) -> (f64, f64) {
        let half = self.freqs.len();
        let k = position * half + i;
        if k < self.cos.len() {
            (self.sin[k], self.cos[k])
        } else {
            (position as f64 * self.freqs[i]).sin_cos()
        }
    }
}

/// Rotates the pairs (i, i + half) of every head segment of `row` by
/// `position · θ_i`, or by its negative when `inverse` is set.
pub fn rope_row<S: Scalar>(row: &mut [S], table: &RopeTable, position: usize, inverse: bool) {
    let half = table.head_dim / 2;
    for head in row.chunks_mut(table.head_dim) {
        for i in 0..half {
            let (sin, cos) = table.sin_cos(position, i);
            let sin = if inverse { -sin } else { sin };
            let (sin, cos) = (S::c(sin), S::c(cos));
            let a = head[i];
            let b = head[i + half];
            head[i] = a * cos - b * sin;
            head[i + half] = a * sin + b * cos;
        }
    }
}

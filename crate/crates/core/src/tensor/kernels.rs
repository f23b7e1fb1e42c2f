//! Matrix kernels shared by the forward and backward passes.
//!
//! Each output row is accumulated sequentially in a fixed order, so results
//! are identical whether rows are computed on one thread or many.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;
const TILE: usize = 4;

/// Writes rows `i0..i0 + rows` of `a[m,k] · b[k,n]` into `out`. Every
/// element is a sequential sum over `t = 0..k` starting from zero; 4×C
/// output tiles are held in registers.
#[inline(always)]
fn gemm_rows_generic<const C: usize>(a: &[f64], b: &[f64], i0: usize, rows: usize, k: usize, n: usize, out: &mut [f64]) {
    let full_cols = n - n % C;
    if rows == TILE {
        let (a0, a1, a2, a3) = (
            &a[i0 * k..(i0 + 1) * k],
            &a[(i0 + 1) * k..(i0 + 2) * k],
            &a[(i0 + 2) * k..(i0 + 3) * k],
            &a[(i0 + 3) * k..(i0 + 4) * k],
        );
        for j in (0..full_cols).step_by(C) {
            let mut acc = [[0.0f64; C]; TILE];
            for t in 0..k {
                let bt: &[f64; C] = b[t * n + j..t * n + j + C].try_into().expect("tile width");
                let av = [a0[t], a1[t], a2[t], a3[t]];
                for r in 0..TILE {
                    for c in 0..C {
                        acc[r][c] += av[r] * bt[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[r * n + j..r * n + j + C].copy_from_slice(acc_r);
            }
        }
    }
    let first_col = if rows == TILE { full_cols } else { 0 };
    for r in 0..rows {
        let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
        for j in first_col..n {
            let mut acc = 0.0;
            for (t, &x) in a_row.iter().enumerate() {
                acc += x * b[t * n + j];
            }
            out[r * n + j] = acc;
        }
    }
}

// Same operations in the same order, only wider registers: results are
// bitwise equal to the generic path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_rows_avx2(a: &[f64], b: &[f64], i0: usize, rows: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm_rows_generic::<8>(a, b, i0, rows, k, n, out)
}

fn gemm_rows(a: &[f64], b: &[f64], i0: usize, rows: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { gemm_rows_avx2(a, b, i0, rows, k, n, out) };
    }
    gemm_rows_generic::<TILE>(a, b, i0, rows, k, n, out)
}

/// `a[m,k] · b[k,n]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let block = |(bi, chunk): (usize, &mut [f64])| {
        gemm_rows(a, b, bi * TILE, chunk.len() / n, k, n, chunk);
    };
    if m * k * n >= PAR_THRESHOLD && m > TILE {
        out.par_chunks_mut(TILE * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(TILE * n).enumerate().for_each(block);
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_nn(a, &transpose(b, n, k), m, k, n)
}

/// `a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    matmul_nn(&transpose(a, k, m), b, m, k, n)
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

//! Floating-point element types and the dense matrix-multiply entry points.
//!
//! `f64` is the reference precision; `f32` is available for speed runs. All
//! matrix products go through [`gemm`], which wraps `matrixmultiply` behind a
//! bounds-checked, row-major interface.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::parallel;

/// Storage type tag, persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` constant into this type.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Whether a gemm operand is read as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

impl Trans {
    /// Row/column strides of the logical `rows×cols` operand stored row-major with leading dimension `ld`.
    fn strides(self, ld: usize) -> (isize, isize) {
        match self {
            Trans::N => (ld as isize, 1),
            Trans::T => (1, ld as isize),
        }
    }

    fn stored_extent(self, rows: usize, cols: usize, ld: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        match self {
            Trans::N => (rows - 1) * ld + cols,
            Trans::T => (cols - 1) * ld + rows,
        }
    }
}

/// Row-major `c[m×n] = alpha·op(a)[m×k]·op(b)[k×n] + beta·c`.
///
/// `lda`/`ldb`/`ldc` are the row strides of the operands *as stored*.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n, "ldc {ldc} < n {n}");
    assert!(c.len() >= (m - 1) * ldc + n, "c too short");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.len() >= ta.stored_extent(m, k, lda), "a too short");
    assert!(b.len() >= tb.stored_extent(k, n, ldb), "b too short");
    let (rsa, csa) = ta.strides(lda);
    let (rsb, csb) = tb.strides(ldb);
    // SAFETY: extents checked above against each operand's strided footprint.
    unsafe {
        T::gemm_raw(
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
            ldc as isize,
            1,
        );
    }
}

/// Rows of `c` per parallel task in [`par_gemm`]. Fixed, so the work split
/// never depends on the thread count.
pub const GEMM_ROW_BLOCK: usize = 32;

/// [`gemm`] with the output rows split into fixed blocks that run in parallel.
///
/// Each output element is produced by exactly one sequential gemm call, so
/// the result is bit-identical to a single [`gemm`] and independent of the
/// number of threads.
#[allow(clippy::too_many_arguments)]
pub fn par_gemm<T: Scalar>(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m <= GEMM_ROW_BLOCK || !parallel::enabled() {
        gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
        return;
    }
    let c = &mut c[..(m - 1) * ldc + n];
    parallel::for_each_chunk_mut(c, GEMM_ROW_BLOCK * ldc, |blk, c_blk| {
        let r0 = blk * GEMM_ROW_BLOCK;
        let rows = GEMM_ROW_BLOCK.min(m - r0);
        let a_off = match ta {
            Trans::N => r0 * lda,
            Trans::T => r0,
        };
        gemm(ta, tb, rows, n, k, alpha, &a[a_off..], lda, b, ldb, beta, c_blk, ldc);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: Trans, tb: Trans, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let at = |i: usize, p: usize| match ta {
            Trans::N => a[i * k + p],
            Trans::T => a[p * m + i],
        };
        let bt = |p: usize, j: usize| match tb {
            Trans::N => b[p * n + j],
            Trans::T => b[j * k + p],
        };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transpositions() {
        let (m, n, k) = (7, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [Trans::N, Trans::T] {
            for tb in [Trans::N, Trans::T] {
                let lda = if ta == Trans::N { k } else { m };
                let ldb = if tb == Trans::N { n } else { k };
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, 1.0, &a, lda, &b, ldb, 0.0, &mut c, n);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn par_gemm_is_bitwise_equal_to_gemm() {
        let (m, n, k) = (3 * GEMM_ROW_BLOCK + 5, 33, 71);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 1000) as f64 / 997.0 - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 1000) as f64 / 991.0 - 0.5).collect();
        let mut c1 = vec![0.25; m * n];
        let mut c2 = c1.clone();
        gemm(Trans::N, Trans::N, m, n, k, 1.0, &a, k, &b, n, 1.0, &mut c1, n);
        par_gemm(Trans::N, Trans::N, m, n, k, 1.0, &a, k, &b, n, 1.0, &mut c2, n);
        assert_eq!(c1, c2);
    }

    #[test]
    fn zero_inner_dimension_scales_output() {
        let mut c = vec![2.0f32; 4];
        gemm(Trans::N, Trans::N, 2, 2, 0, 1.0, &[], 0, &[], 2, 0.5, &mut c, 2);
        assert_eq!(c, vec![1.0; 4]);
    }
}

//! Dense row-major buffers and the handful of BLAS-style kernels the model needs.
//!
//! Everything is generic over [`Float`] so the same forward/backward code runs in
//! `f32` for training and `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::FromPrimitive;

/// Scalar type usable by the model.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// All strided accesses implied by the dimensions must stay inside the slices.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 always converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float always converts")
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> View<'a, T> {
    /// Contiguous row-major `rows × cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        View { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Column block `[start, start + width)` of a contiguous row-major matrix with `ld` columns.
    pub fn cols_of(data: &'a [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        View { data, offset: start, rows, cols: width, row_stride: ld, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// A strided mutable destination.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        ViewMut { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        ViewMut { data, offset: start, rows, cols: width, row_stride: ld, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        ViewMut {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub fn gemm<T: Float>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "row counts differ");
    assert_eq!(b.cols, c.cols, "column counts differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len() || a.rows * a.cols == 0);
    assert!(b.last_index() < b.data.len() || b.rows * b.cols == 0);
    let c_last = c.offset + (c.rows - 1) * c.row_stride + (c.cols - 1) * c.col_stride;
    assert!(c_last < c.data.len());
    if a.cols == 0 {
        // Empty inner dimension: only the beta scaling applies.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.row_stride + col * c.col_stride;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: every strided index was bounds-checked above.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Row-major `a (m×k) · b (k×n)`.
pub fn matmul<T: Float>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), View::new(a, m, k), View::new(b, k, n), T::zero(), ViewMut::new(&mut out, m, n));
    out
}

/// `out (k×n) += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_at_b_acc<T: Float>(a: &[T], m: usize, k: usize, g: &[T], n: usize, out: &mut [T]) {
    gemm(
        T::one(),
        View::new(a, m, k).t(),
        View::new(g, m, n),
        T::one(),
        ViewMut::new(out, k, n),
    );
}

/// `g (m×n) · wᵀ` where `w` is `k×n`; result is `m×k`.
pub fn matmul_a_bt<T: Float>(g: &[T], m: usize, n: usize, w: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    gemm(T::one(), View::new(g, m, n), View::new(w, k, n).t(), T::zero(), ViewMut::new(&mut out, m, k));
    out
}

pub fn add_assign<T: Float>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn add<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        let got = matmul(&a, 2, 3, &b, 4);
        let want = naive(&a, 2, 3, &b, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 + 1.0).collect(); // 3×2
        let g: Vec<f64> = (0..9).map(|x| x as f64 - 4.0).collect(); // 3×3
        let mut out = vec![0.0; 6];
        matmul_at_b_acc(&a, 3, 2, &g, 3, &mut out);
        // aᵀ (2×3) · g (3×3)
        let mut at = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                at[j * 3 + i] = a[i * 2 + j];
            }
        }
        assert_eq!(out, naive(&at, 2, 3, &g, 3));

        let w: Vec<f64> = (0..6).map(|x| x as f64 * 0.25).collect(); // 2×3
        let got = matmul_a_bt(&g, 3, 3, &w, 2);
        let mut wt = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                wt[j * 2 + i] = w[i * 3 + j];
            }
        }
        assert_eq!(got, naive(&g, 3, 3, &wt, 2));
    }

    #[test]
    fn column_block_views() {
        // 2×4 matrix, take columns 2..4 and multiply by identity.
        let a: Vec<f64> = (0..8).map(|x| x as f64).collect();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        gemm(1.0, View::cols_of(&a, 2, 4, 2, 2), View::new(&eye, 2, 2), 0.0, ViewMut::new(&mut out, 2, 2));
        assert_eq!(out, vec![2.0, 3.0, 6.0, 7.0]);
    }
}

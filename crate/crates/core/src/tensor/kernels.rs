//! Dense kernels behind the tape operations. Every output element is
//! produced by exactly one task with a fixed summation order, so results are
//! bitwise identical regardless of thread count.

use crate::real::Real;

const COL_BLOCK: usize = 256;
const ROW_GROUP: usize = 4;
const DOT_BLOCK: usize = 2048;

#[cfg(feature = "parallel")]
fn for_each_chunk<T: Real>(c: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    use rayon::prelude::*;
    c.par_chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
}

#[cfg(not(feature = "parallel"))]
fn for_each_chunk<T: Real>(c: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T])) {
    c.chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Eight-lane accumulation so the compiler can vectorize the reduction.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Row-grouped, column-blocked `C += op(A) · B` where `a_at(i, p)` reads
/// the (i, p) entry of op(A).
fn gemm_axpy<T: Real, F>(m: usize, k: usize, n: usize, a_at: F, b: &[T], c: &mut [T])
where
    F: Fn(usize, usize) -> T + Sync + Send,
{
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for_each_chunk(c, ROW_GROUP * n, |g, rows| {
        let i0 = g * ROW_GROUP;
        let nrows = rows.len() / n;
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            for p in 0..k {
                let bp = &b[p * n + j0..p * n + j1];
                for r in 0..nrows {
                    let a = a_at(i0 + r, p);
                    if a != T::zero() {
                        axpy(a, bp, &mut rows[r * n + j0..r * n + j1]);
                    }
                }
            }
            j0 = j1;
        }
    });
}

/// `C[m,n] += A[m,k] · B[k,n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    gemm_axpy(m, k, n, |i, p| a[i * k + p], b, c);
}

/// `C[m,n] += A[k,m]ᵀ · B[k,n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    gemm_axpy(m, k, n, |i, p| a[p * m + i], b, c);
}

/// `C[m,n] += A[m,k] · B[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for_each_chunk(c, n, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        let mut p0 = 0;
        while p0 < k {
            let p1 = (p0 + DOT_BLOCK).min(k);
            for (j, cv) in row.iter_mut().enumerate() {
                *cv += dot(&ai[p0..p1], &b[j * k + p0..j * k + p1]);
            }
            p0 = p1;
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x[cin,h,w]` into `cols[cin*kh*kw, oh*ow]` with zero padding.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p_len = g.out_len();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx[cin,h,w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p_len = g.out_len();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

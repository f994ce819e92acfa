//! Small dense linear algebra on packed lower-triangular matrices, generic
//! over the scalar type so factorizations can be differentiated.
//!
//! Random-effect dimensions here are tiny (r <= 16), so everything is plain
//! loops over a row-major packed lower triangle: entry (i, j), j <= i, lives
//! at `i (i + 1) / 2 + j`.

use crate::ad::Scalar;
use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Index of (i, j), j <= i, in a packed lower triangle.
#[inline(always)]
pub fn lt(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Cholesky factor of a symmetric positive definite matrix given as its
/// packed lower triangle. Fails on a non-positive pivot (checked on the
/// primal value).
pub fn chol_packed<S: Scalar>(n: usize, a: &[S]) -> Result<Vec<S>> {
    debug_assert_eq!(a.len(), packed_len(n));
    let mut l: Vec<S> = a.to_vec();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = l[lt(i, j)];
            for k in 0..j {
                sum = sum - l[lt(i, k)] * l[lt(j, k)];
            }
            if i == j {
                let p = sum.primal();
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::domain(format!(
                        "Cholesky pivot {i} is not positive (got {p:e})"
                    )));
                }
                l[lt(i, j)] = sum.sqrt();
            } else {
                l[lt(i, j)] = sum / l[lt(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve L x = b by forward substitution.
pub fn fwd_solve<S: Scalar>(n: usize, l: &[S], b: &[S]) -> Vec<S> {
    let mut x: Vec<S> = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc = acc - l[lt(i, j)] * x[j];
        }
        x.push(acc / l[lt(i, i)]);
    }
    x
}

/// Solve L^T x = b by backward substitution.
pub fn bwd_solve_t<S: Scalar>(n: usize, l: &[S], b: &[S]) -> Vec<S> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in (i + 1)..n {
            acc = acc - l[lt(j, i)] * x[j];
        }
        x[i] = acc / l[lt(i, i)];
    }
    x
}

/// Solve (L L^T) x = b.
pub fn chol_solve<S: Scalar>(n: usize, l: &[S], b: &[S]) -> Vec<S> {
    let y = fwd_solve(n, l, b);
    bwd_solve_t(n, l, &y)
}

/// y = L x for packed lower-triangular L. Row accumulation runs j = 0..=i so
/// a diagonal L reproduces the diagonal code path bit for bit.
pub fn lower_matvec<S: Scalar>(n: usize, l: &[S], x: &[S]) -> Vec<S> {
    let mut y: Vec<S> = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = S::zero();
        for j in 0..=i {
            acc = acc + l[lt(i, j)] * x[j];
        }
        y.push(acc);
    }
    y
}

/// Sum of log diagonal entries (log-determinant of a triangular factor).
pub fn log_det_lower<S: Scalar>(n: usize, l: &[S]) -> S {
    let mut acc = S::zero();
    for i in 0..n {
        acc = acc + l[lt(i, i)].ln();
    }
    acc
}

/// L L^T as a dense row-major matrix.
pub fn lower_times_transpose(n: usize, l: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            let m = if i < j { i } else { j };
            for k in 0..=m {
                acc += l[lt(i, k)] * l[lt(j, k)];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

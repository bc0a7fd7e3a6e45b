//! Small dense kernels with a fixed summation order.
//!
//! The classical recursions and their tape-recorded counterparts both go
//! through these functions, so the two paths produce bit-identical results
//! for the same inputs. nalgebra's own products may dispatch to blocked or
//! FMA kernels depending on size, which would break that.

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// `a · b`, accumulated left to right over the inner index.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.ncols(), b.nrows());
    let (n, k, p) = (a.nrows(), a.ncols(), b.ncols());
    Mat::from_fn(n, p, |i, j| {
        let mut acc = 0.0;
        for r in 0..k {
            acc += a[(i, r)] * b[(r, j)];
        }
        acc
    })
}

/// `wᵀ · x` for a column vector `x`.
pub fn tmatvec(w: &Mat, x: &Mat) -> Mat {
    debug_assert_eq!(w.nrows(), x.nrows());
    debug_assert_eq!(x.ncols(), 1);
    Mat::from_fn(w.ncols(), 1, |j, _| {
        let mut acc = 0.0;
        for i in 0..w.nrows() {
            acc += w[(i, j)] * x[(i, 0)];
        }
        acc
    })
}

/// `a · bᵀ` for column vectors.
pub fn outer(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

pub fn dot(a: &Mat, b: &Mat) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn trace(a: &Mat) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.nrows().min(a.ncols()) {
        acc += a[(i, i)];
    }
    acc
}

pub fn sq_norm(a: &Mat) -> f64 {
    dot(a, a)
}

/// Column `t` of `x` as an owned column vector.
pub fn column(x: &Mat, t: usize) -> Mat {
    Mat::from_column_slice(x.nrows(), 1, x.column(t).as_slice())
}

/// `W(0)`: the first `m` columns of the `l×l` identity.
pub fn leading_identity(l: usize, m: usize) -> Mat {
    Mat::from_fn(l, m, |i, j| if i == j { 1.0 } else { 0.0 })
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Ratio of the largest to the smallest singular value.
pub fn condition_number(a: &Mat) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

//! Brute-force references for checking the fast paths: direct covariance
//! accumulation and inversion, finite differences, batch least squares and
//! straight-line loss evaluators.
//!
//! Nothing here calls into `baseline`, `autograd`, `unrolled` or `loss`, and
//! products use nalgebra's operators rather than the crate's own kernels.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffSpec {
    /// Central-difference step.
    pub h: f64,
}

impl FiniteDiffSpec {
    pub fn gradient() -> Self {
        FiniteDiffSpec { h: 1e-5 }
    }

    pub fn divergence() -> Self {
        FiniteDiffSpec { h: 1e-6 }
    }

    fn check(&self) -> Result<()> {
        if self.h > 0.0 && self.h.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("finite-difference step must be positive, got {}", self.h)))
        }
    }
}

/// `(β^t G0⁻¹ + Σ_i β^(t-i) y(i) y(i)ᵀ)⁻¹` for the `t` columns of `ys`.
pub fn direct_gain(ys: &Mat, beta: f64, g0: &Mat) -> Result<Mat> {
    let m = g0.nrows();
    if g0.ncols() != m || (ys.ncols() > 0 && ys.nrows() != m) {
        return Err(Error::Dimension(format!("G0 {:?} with outputs {:?}", g0.shape(), ys.shape())));
    }
    let t = ys.ncols();
    let g0_inv = g0.clone().try_inverse().ok_or_else(|| Error::Singular("G0 is not invertible".into()))?;
    let mut c = g0_inv * beta.powi(t as i32);
    for i in 0..t {
        let y = ys.column(i);
        c += (y * y.transpose()) * beta.powi((t - 1 - i) as i32);
    }
    c.try_inverse().ok_or_else(|| Error::Singular("accumulated correlation is singular".into()))
}

/// Central-difference gradient of `f` at `p`.
pub fn fd_gradient<F>(f: F, p: &[f64], spec: FiniteDiffSpec) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    spec.check()?;
    let mut q = p.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        q[i] = p[i] + spec.h;
        let up = f(&q)?;
        q[i] = p[i] - spec.h;
        let down = f(&q)?;
        q[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical {
                step: i,
                what: format!("non-finite evaluation while differencing coordinate {i}"),
            });
        }
        out.push((up - down) / (2.0 * spec.h));
    }
    Ok(out)
}

/// Central-difference divergence `Σ_i ∂f_i/∂x_i` of a map `R^d → R^d`.
pub fn fd_divergence<F>(f: F, x: &DVector<f64>, spec: FiniteDiffSpec) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    spec.check()?;
    let mut q = x.clone();
    let mut div = 0.0;
    for i in 0..x.len() {
        q[i] = x[i] + spec.h;
        let up = f(&q);
        q[i] = x[i] - spec.h;
        let down = f(&q);
        q[i] = x[i];
        if up.len() != x.len() || down.len() != x.len() {
            return Err(Error::Dimension(format!("divergence of a map from R^{} to R^{}", x.len(), up.len())));
        }
        let d = (up[i] - down[i]) / (2.0 * spec.h);
        if !d.is_finite() {
            return Err(Error::Numerical {
                step: i,
                what: format!("non-finite difference in coordinate {i}"),
            });
        }
        div += d;
    }
    Ok(div)
}

/// `argmin_W Σ_i w_i ‖x_i - W y_i‖²` for columns `x_i`, `y_i`, via SVD.
pub fn weighted_least_squares(xs: &Mat, ys: &Mat, weights: &[f64]) -> Result<Mat> {
    let n = xs.ncols();
    if ys.ncols() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "{n} targets, {} inputs, {} weights",
            ys.ncols(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Config("weights must be nonnegative".into()));
    }
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    // rows are samples: (√w Yᵀ) Wᵀ = √w Xᵀ
    let design = Mat::from_fn(n, ys.nrows(), |i, j| sw[i] * ys[(j, i)]);
    let rhs = Mat::from_fn(n, xs.nrows(), |i, j| sw[i] * xs[(j, i)]);
    let svd = design.svd(true, true);
    if svd.rank(1e-12 * svd.singular_values.max()) < ys.nrows() {
        return Err(Error::Singular("least-squares design is rank deficient".into()));
    }
    let wt = svd.solve(&rhs, 0.0).map_err(|e| Error::Singular(e.to_string()))?;
    Ok(wt.transpose())
}

/// `Σ_t Σ_i (s_it - y_it)²` by explicit loops.
pub fn sum_squared_error(y: &Mat, s: &Mat) -> f64 {
    let mut acc = 0.0;
    for t in 0..y.ncols() {
        for i in 0..y.nrows() {
            let d = s[(i, t)] - y[(i, t)];
            acc += d * d;
        }
    }
    acc
}

/// `(1/T) Σ_t ‖s(t) - y(t)‖²` by explicit loops.
pub fn mean_squared_error(y: &Mat, s: &Mat) -> f64 {
    if y.ncols() == 0 {
        0.0
    } else {
        sum_squared_error(y, s) / y.ncols() as f64
    }
}

/// Projector onto the column space of `a` by modified Gram-Schmidt.
pub fn gram_schmidt_projector(a: &Mat) -> Result<Mat> {
    let l = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..a.ncols() {
        let mut v: DVector<f64> = a.column(j).into_owned();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        let n = v.norm();
        if n < 1e-12 * a.norm() {
            return Err(Error::RankDeficient(format!("column {j} is dependent")));
        }
        basis.push(v / n);
    }
    let mut p = Mat::zeros(l, l);
    for q in &basis {
        p += q * q.transpose();
    }
    Ok(p)
}

/// Per-sample SURE term for the fixed linear estimator `y = Wᵀx` with
/// square invertible mixing `A`: `‖y‖² - 2yᵀA⁻¹x + 2σ² tr(A⁻¹ W)`.
pub fn linear_sure_term(w: &Mat, a_inv: &Mat, x: &DVector<f64>, noise_var: f64) -> f64 {
    let y = w.transpose() * x;
    let u = a_inv * x;
    y.norm_squared() - 2.0 * y.dot(&u) + 2.0 * noise_var * (a_inv * w).trace()
}

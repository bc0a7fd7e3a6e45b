//! Classical adaptive separators: RLS for (nonlinear) PCA and EASI.
//!
//! Both recursions run over the columns of the observation matrix in order
//! and use the output convention `y = Wᵀx` with `W` of shape `l×m`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RunRecord;
use crate::linalg::{self, Mat};
use crate::model::MixtureInstance;

/// Elementwise output nonlinearity `g`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Linear,
    Cubic,
    /// `tanh(scale * s)`.
    Tanh { scale: f64 },
}

impl Nonlinearity {
    pub fn tanh() -> Self {
        Nonlinearity::Tanh { scale: 1.0 }
    }

    #[inline]
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Linear => v,
            Nonlinearity::Cubic => v * v * v,
            Nonlinearity::Tanh { scale } => (scale * v).tanh(),
        }
    }

    pub fn apply(self, v: &Mat) -> Mat {
        match self {
            Nonlinearity::Linear => v.clone(),
            _ => v.map(|s| self.eval(s)),
        }
    }
}

/// Initial separator and gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// `G(0) = δ⁻¹ I`.
    pub delta: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { delta: 0.01 }
    }
}

impl InitSpec {
    pub fn state(&self, l: usize, m: usize) -> SeparatorState {
        SeparatorState {
            w: linalg::leading_identity(l, m),
            g: Mat::identity(m, m) / self.delta,
        }
    }
}

/// `W(t)` and the running inverse autocorrelation `G(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorState {
    pub w: Mat,
    pub g: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlsConfig {
    pub beta: f64,
    pub nonlinearity: Nonlinearity,
    pub init: InitSpec,
}

impl Default for RlsConfig {
    fn default() -> Self {
        RlsConfig {
            beta: 0.99,
            nonlinearity: Nonlinearity::tanh(),
            init: InitSpec::default(),
        }
    }
}

impl RlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("forgetting factor must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.init.delta > 0.0) {
            return Err(Error::Config("init.delta must be positive".into()));
        }
        Ok(())
    }
}

/// EASI step sizes: one value for every step, or a per-step table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    Table(Vec<f64>),
}

impl StepSize {
    /// Step size at `t`; a table shorter than the run repeats its last entry.
    pub fn at(&self, t: usize) -> f64 {
        match self {
            StepSize::Fixed(v) => *v,
            StepSize::Table(vs) => vs[t.min(vs.len() - 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EasiConfig {
    pub step_size: StepSize,
    pub nonlinearity: Nonlinearity,
    pub init: InitSpec,
}

impl Default for EasiConfig {
    fn default() -> Self {
        EasiConfig {
            step_size: StepSize::Fixed(0.01),
            nonlinearity: Nonlinearity::Cubic,
            init: InitSpec::default(),
        }
    }
}

impl EasiConfig {
    /// Step sizes must be nonnegative; zero freezes the separator.
    pub fn validate(&self) -> Result<()> {
        let ok = match &self.step_size {
            StepSize::Fixed(v) => *v >= 0.0 && v.is_finite(),
            StepSize::Table(vs) => !vs.is_empty() && vs.iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("EASI step sizes must be finite and nonnegative".into()))
        }
    }
}

/// Output of one RLS step.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsStep {
    pub state: SeparatorState,
    pub y: Mat,
    pub e: Mat,
}

fn check(step: usize, what: &str, m: &Mat) -> Result<()> {
    if linalg::all_finite(m) {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            what: format!("non-finite {what}"),
        })
    }
}

fn rls_step_at(state: &SeparatorState, x: &Mat, cfg: &RlsConfig, t: usize) -> Result<RlsStep> {
    let SeparatorState { w, g } = state;
    if x.nrows() != w.nrows() || g.nrows() != w.ncols() {
        return Err(Error::shape(
            "rls_step",
            format!("x has {} rows, W is {:?}, G is {:?}", x.nrows(), w.shape(), g.shape()),
        ));
    }
    let beta = cfg.beta;
    let y = cfg.nonlinearity.apply(&linalg::tmatvec(w, x));
    check(t, "output y", &y)?;
    let h = linalg::matmul(g, &y);
    let denom = beta + linalg::dot(&y, &h);
    let f = h.map(|v| v / denom);
    check(t, "gain f", &f)?;
    let g_new = (g - linalg::outer(&f, &h)).map(|v| v / beta);
    check(t, "inverse correlation G", &g_new)?;
    let e = x - linalg::matmul(w, &y);
    let w_new = w + linalg::outer(&e, &f);
    check(t, "separator W", &w_new)?;
    Ok(RlsStep {
        state: SeparatorState { w: w_new, g: g_new },
        y,
        e,
    })
}

/// One RLS-for-PCA update for observation `x` (an `l×1` column).
pub fn rls_step(state: &SeparatorState, x: &Mat, cfg: &RlsConfig) -> Result<RlsStep> {
    rls_step_at(state, x, cfg, 0)
}

/// Runs RLS over every column of `observations`, returning the `m×T`
/// outputs and the final state.
pub fn rls_trajectory(observations: &Mat, m: usize, cfg: &RlsConfig) -> Result<(Mat, SeparatorState)> {
    cfg.validate()?;
    let len = observations.ncols();
    let mut state = cfg.init.state(observations.nrows(), m);
    let mut ys = Mat::zeros(m, len);
    for t in 0..len {
        let step = rls_step_at(&state, &linalg::column(observations, t), cfg, t)?;
        ys.set_column(t, &step.y.column(0));
        state = step.state;
    }
    Ok((ys, state))
}

pub fn rls_run(instance: &MixtureInstance, cfg: &RlsConfig) -> Result<RunRecord> {
    let (ys, _) = rls_trajectory(&instance.observations, instance.m, cfg)?;
    RunRecord::scored("rls", ys, &instance.sources, crate::digest(cfg))
}

/// `H(y) = yyᵀ - I + g(y)yᵀ - y g(y)ᵀ`.
pub fn easi_h(y: &Mat, g: Nonlinearity) -> Mat {
    let gy = g.apply(y);
    let m = y.len();
    let yy = linalg::outer(y, y) - Mat::identity(m, m);
    (yy + linalg::outer(&gy, y)) - linalg::outer(y, &gy)
}

/// EASI update in output space: `W ← W - λ W Hᵀ`.
///
/// With `B = Wᵀ` this is the serial update `B ← B - λ H B`.
pub fn easi_step(w: &Mat, y: &Mat, step_size: f64, g: Nonlinearity) -> Result<Mat> {
    if y.len() != w.ncols() {
        return Err(Error::shape(
            "easi_step",
            format!("y has {} entries, W is {:?}", y.len(), w.shape()),
        ));
    }
    let h = easi_h(y, g);
    let delta = linalg::matmul(w, &h.transpose()).map(|v| step_size * v);
    let w_new = w - delta;
    check(0, "separator W", &w_new)?;
    Ok(w_new)
}

pub fn easi_trajectory(observations: &Mat, m: usize, cfg: &EasiConfig) -> Result<(Mat, Mat)> {
    cfg.validate()?;
    let len = observations.ncols();
    let mut w = linalg::leading_identity(observations.nrows(), m);
    let mut ys = Mat::zeros(m, len);
    for t in 0..len {
        let y = linalg::tmatvec(&w, &linalg::column(observations, t));
        ys.set_column(t, &y.column(0));
        w = easi_step(&w, &y, cfg.step_size.at(t), cfg.nonlinearity).map_err(|e| match e {
            Error::Numerical { what, .. } => Error::Numerical { step: t, what },
            other => other,
        })?;
    }
    Ok((ys, w))
}

pub fn easi_run(instance: &MixtureInstance, cfg: &EasiConfig) -> Result<RunRecord> {
    let (ys, _) = easi_trajectory(&instance.observations, instance.m, cfg)?;
    RunRecord::scored("easi", ys, &instance.sources, crate::digest(cfg))
}

/// Exponentially weighted correlations accumulated directly.
///
/// Test oracle for the recursive form: seeded with `C_y(0) = G(0)⁻¹` and
/// `C_xy(0) = W(0) C_y(0)`, `closed_form_w` reproduces the recursion's `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStats {
    pub c_y: Mat,
    pub c_xy: Mat,
}

impl OracleStats {
    pub fn zeros(l: usize, m: usize) -> Self {
        OracleStats {
            c_y: Mat::zeros(m, m),
            c_xy: Mat::zeros(l, m),
        }
    }

    pub fn from_initial(state: &SeparatorState) -> Result<Self> {
        let c_y = state
            .g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("G(0) is not invertible".into()))?;
        Ok(OracleStats {
            c_xy: &state.w * &c_y,
            c_y,
        })
    }

    pub fn push(&mut self, x: &Mat, y: &Mat, beta: f64) {
        self.c_y = &self.c_y * beta + y * y.transpose();
        self.c_xy = &self.c_xy * beta + x * y.transpose();
    }
}

/// Least-squares separator `W = C_xy C_y⁻¹` (so that `x ≈ W y`).
pub fn closed_form_w(stats: &OracleStats) -> Result<Mat> {
    let cond = linalg::condition_number(&stats.c_y);
    if !(cond < 1e12) {
        return Err(Error::Singular(format!("C_y condition number {cond:e}")));
    }
    // W C_y = C_xy  <=>  C_yᵀ Wᵀ = C_xyᵀ
    let lu = stats.c_y.transpose().lu();
    let wt = lu
        .solve(&stats.c_xy.transpose())
        .ok_or_else(|| Error::Singular("C_y is singular".into()))?;
    Ok(wt.transpose())
}

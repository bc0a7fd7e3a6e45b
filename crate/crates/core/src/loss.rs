//! Training losses on the tape: sequence MSE, MSE with a feasibility penalty
//! on the per-layer scalars, and a SURE surrogate that needs only the mixing
//! matrix and noise variance instead of the sources.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Smallest-to-largest singular value ratio below which `A` is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// How the divergence of `f(x) = Wᵀx` enters the SURE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceRule {
    /// `tr(A† W)`: the Stein correction for source-space risk, unbiased for
    /// any full-column-rank `A`.
    #[default]
    Unbiased,
    /// `tr(W)`: coincides with `Unbiased` only when `A = I`. Square `W` only.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossConfig {
    Mse,
    RegularizedMse {
        lambda_reg: f64,
    },
    Sure {
        #[serde(default)]
        divergence: DivergenceRule,
    },
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::Mse
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossConfig::RegularizedMse { lambda_reg } if !(*lambda_reg >= 0.0) => {
                Err(Error::Config(format!("lambda_reg must be >= 0, got {lambda_reg}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossConfig::Mse => "mse",
            LossConfig::RegularizedMse { .. } => "regularized_mse",
            LossConfig::Sure { .. } => "sure",
        }
    }
}

/// `A` with its range projector and pseudoinverse.
#[derive(Debug, Clone)]
pub struct SureContext {
    pub a: Mat,
    /// `l×l` orthogonal projector onto `range(A)`.
    pub p: Mat,
    /// `m×l`, `A† A = I_m`.
    pub a_pinv: Mat,
    pub noise_var: f64,
}

/// Builds the projector and pseudoinverse of a full-column-rank `A`.
pub fn sure_context(a: &Mat, noise_var: f64) -> Result<SureContext> {
    let (l, m) = a.shape();
    if m == 0 || l < m {
        return Err(Error::RankDeficient(format!("{l}x{m} mixing matrix cannot have full column rank")));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {noise_var}")));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_TOLERANCE * smax) {
        return Err(Error::RankDeficient(format!("singular values range {smin:e}..{smax:e}")));
    }
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested Vᵀ");
    let inv_s = Mat::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    let a_pinv = v_t.transpose() * inv_s * u.transpose();
    let p = u * u.transpose();
    Ok(SureContext {
        a: a.clone(),
        p,
        a_pinv,
        noise_var,
    })
}

impl SureContext {
    /// Largest violation of the projector and pseudoinverse identities.
    pub fn invariant_error(&self) -> f64 {
        let m = self.a.ncols();
        [
            (&self.p * &self.p - &self.p).norm(),
            (self.p.transpose() - &self.p).norm(),
            (&self.p * &self.a - &self.a).norm(),
            (&self.a_pinv * &self.a - Mat::identity(m, m)).norm(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn check_seq(ys: &[Var], tape: &Tape, rows: usize, cols: usize, what: &str) -> Result<()> {
    if ys.len() != cols {
        return Err(Error::shape("loss", format!("{} outputs against {cols} {what} columns", ys.len())));
    }
    for (t, &y) in ys.iter().enumerate() {
        if tape.shape(y) != (rows, 1) {
            return Err(Error::shape(
                "loss",
                format!("output {t} has shape {:?}, expected ({rows}, 1)", tape.shape(y)),
            ));
        }
    }
    Ok(())
}

/// `Σ_t ‖s(t) - y(t)‖²`.
pub fn mse_loss(tape: &mut Tape, ys: &[Var], s: &Mat) -> Result<Var> {
    check_seq(ys, tape, s.nrows(), s.ncols(), "source")?;
    let mut terms = Vec::with_capacity(ys.len());
    for (t, &y) in ys.iter().enumerate() {
        let st = tape.constant(linalg::column(s, t));
        let d = tape.sub(st, y)?;
        terms.push(tape.sq_norm(d)?);
    }
    tape.sum(&terms)
}

/// `λ Σ [ReLU(-ω) + ReLU(ω - 1)]` over the given scalars.
pub fn feasibility_penalty(tape: &mut Tape, omegas: &[Var], lambda_reg: f64) -> Result<Var> {
    if !(lambda_reg >= 0.0) {
        return Err(Error::Config(format!("lambda_reg must be >= 0, got {lambda_reg}")));
    }
    let mut terms = Vec::with_capacity(2 * omegas.len());
    for &w in omegas {
        let neg = tape.neg(w)?;
        terms.push(tape.relu(neg)?);
        let over = tape.add_const(w, -1.0)?;
        terms.push(tape.relu(over)?);
    }
    let total = tape.sum(&terms)?;
    tape.scale(total, lambda_reg)
}

/// [`mse_loss`] plus [`feasibility_penalty`].
pub fn regularized_loss(tape: &mut Tape, ys: &[Var], s: &Mat, omegas: &[Var], lambda_reg: f64) -> Result<Var> {
    let mse = mse_loss(tape, ys, s)?;
    let pen = feasibility_penalty(tape, omegas, lambda_reg)?;
    tape.add(mse, pen)
}

/// `Tr(W)`, the divergence of `x ↦ Wᵀx` for square `W`.
pub fn divergence_linear(tape: &mut Tape, w: Var) -> Result<Var> {
    let (r, c) = tape.shape(w);
    if r != c {
        return Err(Error::Unsupported(format!(
            "trace divergence needs a square separator, got {r}x{c}"
        )));
    }
    tape.trace(w)
}

/// SURE surrogate for `Σ_t ‖s(t) - y(t)‖²`, up to the parameter-free
/// constant `Σ_t ‖s(t)‖²`:
///
/// ```text
/// Σ_t  ‖y(t)‖² - 2 y(t)ᵀ A† x(t) + 2σ² div(t)
/// ```
///
/// where `y(t) = W(t)ᵀx(t)` and `div(t)` follows `rule`. The first term is
/// `‖A†A y‖²`, which equals `‖y‖²` because `A` has full column rank.
pub fn sure_loss(
    tape: &mut Tape,
    ys: &[Var],
    x: &Mat,
    w_used: &[Var],
    ctx: &SureContext,
    rule: DivergenceRule,
) -> Result<Var> {
    let (l, m) = ctx.a.shape();
    if x.nrows() != l {
        return Err(Error::shape("sure_loss", format!("{} observation rows for a {l}x{m} mixing matrix", x.nrows())));
    }
    check_seq(ys, tape, m, x.ncols(), "observation")?;
    if w_used.len() != ys.len() {
        return Err(Error::shape("sure_loss", format!("{} separators for {} outputs", w_used.len(), ys.len())));
    }
    if rule == DivergenceRule::Trace && l != m {
        return Err(Error::Unsupported(format!(
            "the trace divergence is only defined for square mixtures, got l={l}, m={m}"
        )));
    }
    let back = linalg::matmul(&ctx.a_pinv, x);
    let pinv = tape.constant(ctx.a_pinv.clone());
    let mut terms = Vec::with_capacity(3 * ys.len());
    for (t, (&y, &w)) in ys.iter().zip(w_used).enumerate() {
        terms.push(tape.sq_norm(y)?);
        let u = tape.constant(linalg::column(&back, t));
        let cross = tape.dot(y, u)?;
        terms.push(tape.scale(cross, -2.0)?);
        if ctx.noise_var > 0.0 {
            let div = match rule {
                DivergenceRule::Unbiased => {
                    let wa = tape.matmul(w, pinv)?;
                    divergence_linear(tape, wa)?
                }
                DivergenceRule::Trace => divergence_linear(tape, w)?,
            };
            terms.push(tape.scale(div, 2.0 * ctx.noise_var)?);
        }
    }
    tape.sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn consts(tape: &mut Tape, y: &Mat) -> Vec<Var> {
        (0..y.ncols()).map(|t| tape.param(linalg::column(y, t))).collect()
    }

    #[test]
    fn mse_trivial_values() {
        let s = randn(3, 4, 1);
        let mut tape = Tape::new();
        let ys = consts(&mut tape, &s);
        let l = mse_loss(&mut tape, &ys, &s).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let mut tape = Tape::new();
        let ys = consts(&mut tape, &Mat::zeros(2, 1));
        let l = mse_loss(&mut tape, &ys, &Mat::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
    }

    #[test]
    fn mse_matches_plain_sum() {
        let (y, s) = (randn(3, 10, 2), randn(3, 10, 3));
        let mut tape = Tape::new();
        let ys = consts(&mut tape, &y);
        let l = mse_loss(&mut tape, &ys, &s).unwrap();
        let mut expect = 0.0;
        for t in 0..10 {
            for i in 0..3 {
                expect += (s[(i, t)] - y[(i, t)]).powi(2);
            }
        }
        assert!((tape.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_shape_mismatch() {
        let mut tape = Tape::new();
        let ys = consts(&mut tape, &Mat::zeros(2, 3));
        assert!(mse_loss(&mut tape, &ys, &Mat::zeros(3, 3)).is_err());
        assert!(mse_loss(&mut tape, &ys, &Mat::zeros(2, 4)).is_err());
    }

    fn penalty(omega: f64, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let w = tape.param_scalar(omega);
        let p = feasibility_penalty(&mut tape, &[w], lambda).unwrap();
        tape.scalar(p)
    }

    #[test]
    fn penalty_hand_values() {
        for w in [0.0, 0.3, 0.99, 1.0] {
            assert_eq!(penalty(w, 10.0), 0.0);
        }
        assert!((penalty(-0.1, 10.0) - 1.0).abs() < 1e-12);
        assert!((penalty(1.2, 10.0) - 2.0).abs() < 1e-12);
        assert!(LossConfig::RegularizedMse { lambda_reg: -1.0 }.validate().is_err());
    }

    #[test]
    fn sure_context_identity_and_column() {
        let ctx = sure_context(&Mat::identity(3, 3), 0.1).unwrap();
        assert!((&ctx.p - Mat::identity(3, 3)).norm() < 1e-12);
        assert!((&ctx.a_pinv - Mat::identity(3, 3)).norm() < 1e-12);

        let ctx = sure_context(&Mat::from_column_slice(2, 1, &[1.0, 0.0]), 0.1).unwrap();
        assert!((&ctx.p - Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
        assert!((&ctx.a_pinv - Mat::from_row_slice(1, 2, &[1.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn sure_context_rejects_rank_deficient() {
        let a = Mat::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(sure_context(&a, 0.1), Err(Error::RankDeficient(_))));
        assert!(sure_context(&Mat::zeros(2, 3), 0.1).is_err());
    }

    #[test]
    fn sure_context_invariants_random() {
        for seed in 0..10 {
            let ctx = sure_context(&randn(4, 2, seed), 0.01).unwrap();
            assert!(ctx.invariant_error() < 1e-10);
        }
    }

    #[test]
    fn sure_is_shifted_mse_for_identity_mixing() {
        let (y, x) = (randn(3, 6, 4), randn(3, 6, 5));
        let ctx = sure_context(&Mat::identity(3, 3), 0.0).unwrap();
        let mut tape = Tape::new();
        let ys = consts(&mut tape, &y);
        let w = tape.param(randn(3, 3, 6));
        let sure = sure_loss(&mut tape, &ys, &x, &vec![w; 6], &ctx, DivergenceRule::Unbiased).unwrap();
        let to_x = mse_loss(&mut tape, &ys, &x).unwrap();
        let shifted = tape.scalar(to_x) - linalg::sq_norm(&x);
        assert!((tape.scalar(sure) - shifted).abs() < 1e-10);

        let gs = tape.backward(sure).unwrap();
        let gm = tape.backward(to_x).unwrap();
        for &v in &ys {
            assert!((gs.wrt(v) - gm.wrt(v)).norm() < 1e-10);
        }
    }

    #[test]
    fn divergence_term_for_identity_separator() {
        let m = 3;
        let ctx = sure_context(&Mat::identity(m, m), 0.25).unwrap();
        let x = randn(m, 1, 7);
        let run = |var: f64| {
            let ctx = SureContext { noise_var: var, ..ctx.clone() };
            let mut tape = Tape::new();
            let ys = consts(&mut tape, &x);
            let w = tape.param(Mat::identity(m, m));
            let l = sure_loss(&mut tape, &ys, &x, &[w], &ctx, DivergenceRule::Trace).unwrap();
            tape.scalar(l)
        };
        assert!((run(0.25) - run(0.0) - 2.0 * 0.25 * m as f64).abs() < 1e-12);
    }

    #[test]
    fn divergence_of_diagonal() {
        let mut tape = Tape::new();
        let w = tape.param(Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, -2.0])));
        let d = divergence_linear(&mut tape, w).unwrap();
        assert_eq!(tape.scalar(d), -1.5);
        let i3 = tape.param(Mat::identity(3, 3));
        let d = divergence_linear(&mut tape, i3).unwrap();
        assert_eq!(tape.scalar(d), 3.0);
        let rect = tape.param(Mat::zeros(3, 2));
        assert!(divergence_linear(&mut tape, rect).is_err());
    }

    #[test]
    fn trace_rule_bias_is_the_trace_gap() {
        let a = randn(3, 3, 8);
        let w = randn(3, 3, 9);
        let x = randn(3, 2, 10);
        let ctx = sure_context(&a, 0.05).unwrap();
        let eval = |rule| {
            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let ys: Vec<Var> = (0..2)
                .map(|t| {
                    let xt = tape.constant(linalg::column(&x, t));
                    tape.tmatvec(wv, xt).unwrap()
                })
                .collect();
            let l = sure_loss(&mut tape, &ys, &x, &[wv, wv], &ctx, rule).unwrap();
            tape.scalar(l)
        };
        let gap = eval(DivergenceRule::Trace) - eval(DivergenceRule::Unbiased);
        let expect = 2.0 * 2.0 * 0.05 * (w.trace() - (&ctx.a_pinv * &w).trace());
        assert!((gap - expect).abs() < 1e-10, "{gap} vs {expect}");
    }

    #[test]
    fn trace_rule_rejects_tall_mixtures() {
        let ctx = sure_context(&randn(4, 2, 11), 0.01).unwrap();
        let x = randn(4, 1, 12);
        let mut tape = Tape::new();
        let y = tape.param(Mat::zeros(2, 1));
        let w = tape.param(Mat::zeros(4, 2));
        assert!(sure_loss(&mut tape, &[y], &x, &[w], &ctx, DivergenceRule::Trace).is_err());
        assert!(sure_loss(&mut tape, &[y], &x, &[w], &ctx, DivergenceRule::Unbiased).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn penalty_grows_with_distance_to_box(a in -3.0f64..4.0, b in -3.0f64..4.0) {
            let dist = |w: f64| (w - w.clamp(0.0, 1.0)).abs();
            let (near, far) = if dist(a) <= dist(b) { (a, b) } else { (b, a) };
            proptest::prop_assert!(penalty(near, 3.0) <= penalty(far, 3.0) + 1e-12);
        }
    }
}

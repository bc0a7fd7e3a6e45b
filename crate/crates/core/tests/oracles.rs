//! Fast paths against the brute-force references in `oracle`.

use adasep::autograd::Tape;
use adasep::baseline::{self, closed_form_w, OracleStats, RlsConfig};
use adasep::linalg::column;
use adasep::loss::{self, sure_context, DivergenceRule};
use adasep::model::{generate, GeneratorConfig};
use adasep::oracle;
use adasep::Mat;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(r: usize, c: usize, seed: u64) -> Mat {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
}

#[test]
fn rls_gain_matches_direct_inversion_at_every_step() {
    let inst = generate(&GeneratorConfig { m: 3, l: 3, len: 50, seed: 8, ..Default::default() }).unwrap();
    let cfg = RlsConfig { beta: 0.97, ..Default::default() };
    let g0 = cfg.init.state(3, 3).g;
    for t in [1, 2, 10, 25, 50] {
        let prefix = inst.truncated(t);
        let (ys, state) = baseline::rls_trajectory(&prefix.observations, 3, &cfg).unwrap();
        let direct = oracle::direct_gain(&ys, cfg.beta, &g0).unwrap();
        let rel = (&state.g - &direct).norm() / direct.norm();
        assert!(rel < 1e-8, "t = {t}: {rel:e}");
    }
}

#[test]
fn closed_form_separator_matches_weighted_least_squares() {
    let inst = generate(&GeneratorConfig { m: 2, l: 4, len: 60, seed: 9, ..Default::default() }).unwrap();
    let beta: f64 = 0.95;
    let ys = randn(2, 60, 10);
    let mut stats = OracleStats::zeros(4, 2);
    for t in 0..60 {
        stats.push(&column(&inst.observations, t), &column(&ys, t), beta);
    }
    let weights: Vec<f64> = (0..60).map(|i| beta.powi(59 - i)).collect();
    let fast = closed_form_w(&stats).unwrap();
    let slow = oracle::weighted_least_squares(&inst.observations, &ys, &weights).unwrap();
    assert!((&fast - &slow).norm() < 1e-9 * slow.norm());
}

#[test]
fn rls_separator_matches_closed_form_from_its_initial_state() {
    let inst = generate(&GeneratorConfig { m: 3, l: 3, len: 80, seed: 11, ..Default::default() }).unwrap();
    let cfg = RlsConfig::default();
    let init = cfg.init.state(3, 3);
    let (ys, state) = baseline::rls_trajectory(&inst.observations, 3, &cfg).unwrap();
    let mut stats = OracleStats::from_initial(&init).unwrap();
    for t in 0..inst.len {
        stats.push(&column(&inst.observations, t), &column(&ys, t), cfg.beta);
    }
    let w = closed_form_w(&stats).unwrap();
    assert!((&state.w - &w).norm() < 1e-8 * w.norm());
}

#[test]
fn sure_projector_matches_gram_schmidt() {
    for (l, m, seed) in [(3, 3, 1), (5, 2, 2), (6, 4, 3)] {
        let a = randn(l, m, seed);
        let ctx = sure_context(&a, 0.1).unwrap();
        let p = oracle::gram_schmidt_projector(&a).unwrap();
        assert!((&ctx.p - &p).norm() < 1e-10, "{l}x{m}");
    }
}

#[test]
fn tape_mse_matches_explicit_loops() {
    let y = randn(3, 7, 4);
    let s = randn(3, 7, 5);
    let mut tape = Tape::new();
    let ys: Vec<_> = (0..7).map(|t| tape.constant(column(&y, t))).collect();
    let l = loss::mse_loss(&mut tape, &ys, &s).unwrap();
    let fast = tape.scalar(l);
    let slow = oracle::sum_squared_error(&y, &s);
    assert!((fast - slow).abs() < 1e-12 * slow.max(1.0));
}

#[test]
fn library_sure_matches_linear_oracle() {
    let a = randn(3, 3, 6);
    let a_inv = a.clone().try_inverse().unwrap();
    let ctx = sure_context(&a, 0.05).unwrap();
    for seed in 0..10 {
        let w = randn(3, 3, 100 + seed);
        let x = randn(3, 1, 200 + seed);
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let xv = tape.constant(x.clone());
        let y = tape.tmatvec(wv, xv).unwrap();
        let v = loss::sure_loss(&mut tape, &[y], &x, &[wv], &ctx, DivergenceRule::Unbiased).unwrap();
        let expect = oracle::linear_sure_term(&w, &a_inv, &DVector::from_column_slice(x.as_slice()), 0.05);
        assert!((tape.scalar(v) - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }
}

#[test]
fn rls_step_gain_is_symmetric_positive_definite() {
    let inst = generate(&GeneratorConfig { m: 3, l: 3, len: 300, seed: 12, ..Default::default() }).unwrap();
    let (_, state) = baseline::rls_trajectory(&inst.observations, 3, &RlsConfig::default()).unwrap();
    assert!((&state.g - state.g.transpose()).norm() < 1e-8 * state.g.norm());
    assert!(state.g.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn direct_gain_agrees_for_random_forgetting(beta in 0.9f64..1.0, seed in 0u64..1000, len in 1usize..60) {
        let inst = generate(&GeneratorConfig { m: 2, l: 2, len, seed, ..Default::default() }).unwrap();
        let cfg = RlsConfig { beta, ..Default::default() };
        let (ys, state) = baseline::rls_trajectory(&inst.observations, 2, &cfg).unwrap();
        let direct = oracle::direct_gain(&ys, beta, &cfg.init.state(2, 2).g).unwrap();
        prop_assert!((&state.g - &direct).norm() <= 1e-8 * direct.norm());
    }

    #[test]
    fn sure_context_projector_invariants(l in 2usize..7, seed in 0u64..1000) {
        let m = 1 + (seed as usize) % l;
        let a = randn(l, m, seed);
        let ctx = sure_context(&a, 0.01).unwrap();
        prop_assert!(ctx.invariant_error() < 1e-9);
    }
}

//! End-to-end runs of the `adasep` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adasep::baseline::{EasiConfig, RlsConfig, StepSize};
use adasep::cli::{AlgorithmConfig, ExperimentConfig};
use adasep::eval::Curve;
use adasep::loss::{DivergenceRule, LossConfig};
use adasep::model::{read_instance, GeneratorConfig};
use adasep::oracle;
use adasep::train::TrainConfig;
use adasep::unrolled::{Checkpoint, DeepEasiParams, NetConfig};
use serde_json::Value;
use tempfile::TempDir;

fn small(algorithm: AlgorithmConfig) -> ExperimentConfig {
    ExperimentConfig {
        generator: GeneratorConfig { m: 2, l: 2, len: 20, seed: 5, ..Default::default() },
        algorithm,
        train: TrainConfig { epochs: 1, batch_size: 2, train_size: 4, test_size: 3, ..Default::default() },
        output_dir: None,
    }
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn adasep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adasep")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> PathBuf {
    let out = adasep(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().lines().last().unwrap())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_byte_identical_across_runs_and_jobs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let a = run_ok(&["gen", s(&cfg), "--out", s(&tmp.path().join("a"))]);
    let b = run_ok(&["--jobs", "2", "gen", s(&cfg), "--out", s(&tmp.path().join("b"))]);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma, mb);
    assert_eq!(ma["files"].as_object().unwrap().len(), 2 + 4 * 7);
    for rel in ma["files"].as_object().unwrap().keys() {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn gen_with_empty_sets() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let dir = run_ok(&[
        "gen",
        s(&cfg),
        "--set",
        "train.train_size=0",
        "--set",
        "train.test_size=0",
        "--out",
        s(&tmp.path().join("g")),
    ]);
    let files = manifest(&dir)["files"].as_object().unwrap().clone();
    let mut names: Vec<_> = files.keys().cloned().collect();
    names.sort();
    assert_eq!(names, ["config.json", "dataset.json"]);
}

#[test]
fn output_records_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let dir = run_ok(&["baseline", s(&cfg), "--set", "generator.T=30", "--out", s(&tmp.path().join("o"))]);
    let saved: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.generator.len, 30);
    assert_eq!(Curve::read_csv(&dir.join("curve.csv")).unwrap().len(), 30);
    assert_eq!(manifest(&dir)["command"], "baseline");
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let out = Command::new(env!("CARGO_BIN_EXE_adasep"))
        .env(adasep::cli::OUT_ENV, tmp.path().join("root"))
        .args(["gen", s(&cfg)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(dir.starts_with(tmp.path().join("root")));
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn rls_baseline_verify_reports_oracle_agreement() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig { beta: 0.99, ..Default::default() })));
    let dir = run_ok(&["baseline", s(&cfg), "--verify", "--out", s(&tmp.path().join("o"))]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let rows = summary["verify"]["rls"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r["gain_rel_error"].as_f64().unwrap() < 1e-8);
        assert!(r["closed_form_w_rel_error"].as_f64().unwrap() < 1e-6);
    }
    let curve = Curve::read_csv(&dir.join("curve.csv")).unwrap();
    assert_eq!(curve.columns, ["rls", "rls_raw"]);
}

#[test]
fn easi_with_zero_step_never_adapts() {
    let tmp = TempDir::new().unwrap();
    let exp = small(AlgorithmConfig::Easi(EasiConfig { step_size: StepSize::Fixed(0.0), ..Default::default() }));
    let cfg = write_config(tmp.path(), "c.json", &exp);
    let data = run_ok(&["gen", s(&cfg), "--out", s(&tmp.path().join("g"))]);
    let dir = run_ok(&["baseline", s(&cfg), "--out", s(&tmp.path().join("b"))]);
    let curve = Curve::read_csv(&dir.join("curve.csv")).unwrap();
    let raw = curve.column("easi_raw").unwrap();
    // with W fixed at its initial value the output is the observation itself
    let insts: Vec<_> = (0..3).map(|i| read_instance(&data.join(format!("test/{i:06}"))).unwrap()).collect();
    for t in [1, 10, 20] {
        let expect = insts
            .iter()
            .map(|inst| {
                let x = inst.observations.columns(0, t).into_owned();
                let s = inst.sources.columns(0, t).into_owned();
                oracle::mean_squared_error(&x, &s)
            })
            .sum::<f64>()
            / 3.0;
        assert!((raw[t - 1] - expect).abs() < 1e-12 * expect.max(1.0), "t = {t}");
    }
}

#[test]
fn sure_with_deep_rls_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut exp = small(AlgorithmConfig::DeepRls { net: NetConfig::default() });
    exp.train.loss = LossConfig::Sure { divergence: DivergenceRule::Unbiased };
    let cfg = write_config(tmp.path(), "c.json", &exp);
    let out = adasep(&["train", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("SURE") && err.contains("deep_rls"), "{err}");
}

#[test]
fn sure_with_deep_easi_trains() {
    let tmp = TempDir::new().unwrap();
    let mut exp = small(AlgorithmConfig::DeepEasi { net: NetConfig::default() });
    exp.train.loss = LossConfig::Sure { divergence: DivergenceRule::Unbiased };
    let cfg = write_config(tmp.path(), "c.json", &exp);
    let dir = run_ok(&["train", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(dir.join("checkpoint.json").exists());
    assert!(dir.join("history.csv").exists());
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let tmp = TempDir::new().unwrap();
    let net = NetConfig { seed: 4, ..Default::default() };
    let mut exp = small(AlgorithmConfig::DeepEasi { net: net.clone() });
    exp.train.epochs = 0;
    let cfg = write_config(tmp.path(), "c.json", &exp);
    let dir = run_ok(&["train", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    let saved = Checkpoint::load(&dir.join("checkpoint.json")).unwrap();
    assert_eq!(saved, Checkpoint::DeepEasi(DeepEasiParams::new(2, &net).unwrap()));

    let eval = run_ok(&[
        "eval",
        s(&cfg),
        "--checkpoint",
        s(&dir.join("checkpoint.json")),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(fs::read(dir.join("curve.csv")).unwrap(), fs::read(eval.join("curve.csv")).unwrap());
}

#[test]
fn compare_merges_passes_through_and_rejects_mismatch() {
    let tmp = TempDir::new().unwrap();
    let rls = write_config(tmp.path(), "rls.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let easi = write_config(tmp.path(), "easi.json", &small(AlgorithmConfig::Easi(EasiConfig::default())));
    let a = run_ok(&["baseline", s(&rls), "--out", s(&tmp.path().join("a"))]);
    let b = run_ok(&["baseline", s(&easi), "--out", s(&tmp.path().join("b"))]);
    let c = run_ok(&["baseline", s(&easi), "--set", "generator.T=25", "--out", s(&tmp.path().join("c"))]);

    let merged = run_ok(&["compare", s(&a), s(&b), "--out", s(&tmp.path().join("m.csv"))]);
    let curve = Curve::read_csv(&merged).unwrap();
    assert_eq!(curve.columns, ["rls", "rls_raw", "easi", "easi_raw"]);

    let single = run_ok(&["compare", s(&a), "--out", s(&tmp.path().join("single"))]);
    assert_eq!(
        Curve::read_csv(&single).unwrap(),
        Curve::read_csv(&a.join("curve.csv")).unwrap()
    );

    let out = adasep(&["compare", s(&a), s(&c), "--out", s(&tmp.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("20") && err.contains("25"), "{err}");
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = adasep(&["gen", s(&tmp.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn invalid_config_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(AlgorithmConfig::Rls(RlsConfig::default())));
    let out = adasep(&["baseline", s(&cfg), "--set", "algorithm.beta=1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

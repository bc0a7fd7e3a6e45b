//! Command-line front end.
//!
//! Every command reads one JSON experiment config, applies `--set key=value`
//! overrides, and writes its outputs plus `config.json` (the resolved
//! config) and `manifest.json` (config digest and SHA-256 of every file) to
//! one output directory. Datasets are regenerated from the generator seed,
//! so `gen` output and the data used by other commands agree byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baseline::{self, closed_form_w, EasiConfig, OracleStats, RlsConfig};
use crate::error::{Error, Result};
use crate::eval::{convergence_curve, Curve, RunRecord};
use crate::exec::Exec;
use crate::model::{derive_seeds, generate_dataset, write_instance, GeneratorConfig, MixtureInstance};
use crate::oracle::{self, FiniteDiffSpec};
use crate::train::{self, sequence_loss, TrainConfig};
use crate::unrolled::{Checkpoint, DeepEasiParams, DeepRlsParams, NetConfig, UnrolledNet};
use crate::{digest, sha256_hex};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid configs or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit status for I/O failures.
pub const EXIT_IO: i32 = 4;

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUT_ENV: &str = "ADASEP_OUT";

#[derive(Debug, Parser)]
#[command(name = "adasep", version, about = "Adaptive and unrolled blind source separation")]
pub struct Cli {
    /// Worker threads for dataset generation and batch evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    pub config: PathBuf,
    /// Override a config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training and test mixtures.
    Gen(ConfigArgs),
    /// Run RLS or EASI on the test set.
    Baseline {
        #[command(flatten)]
        args: ConfigArgs,
        /// Compare against brute-force oracles and report.
        #[arg(long)]
        verify: bool,
    },
    /// Train Deep RLS or Deep EASI.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        verify: bool,
    },
    /// Evaluate a checkpoint on the test set.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Merge curve CSVs (or output directories holding `curve.csv`).
    Compare {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmConfig {
    Rls(RlsConfig),
    Easi(EasiConfig),
    DeepRls {
        #[serde(default)]
        net: NetConfig,
    },
    DeepEasi {
        #[serde(default)]
        net: NetConfig,
    },
}

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Rls(_) => "rls",
            AlgorithmConfig::Easi(_) => "easi",
            AlgorithmConfig::DeepRls { .. } => "deep_rls",
            AlgorithmConfig::DeepEasi { .. } => "deep_easi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub generator: GeneratorConfig,
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        match &self.algorithm {
            AlgorithmConfig::Rls(c) => c.validate(),
            AlgorithmConfig::Easi(c) => c.validate(),
            _ => Ok(()),
        }
    }

    /// Training and test sets, each generated from its own derived seed.
    pub fn datasets(&self, exec: Exec) -> Result<(Vec<MixtureInstance>, Vec<MixtureInstance>)> {
        let seeds = derive_seeds(self.generator.seed, 2);
        let train = generate_dataset(
            &GeneratorConfig { seed: seeds[0], ..self.generator.clone() },
            self.train.train_size,
            exec,
        )?;
        let test = generate_dataset(
            &GeneratorConfig { seed: seeds[1], ..self.generator.clone() },
            self.train.test_size,
            exec,
        )?;
        Ok((train, test))
    }
}

/// Maps an error to the documented exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        Error::Training { source, .. } => exit_code(source),
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Sets `path` (dot separated) in a JSON object. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty path segment in `{key}`")));
        }
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("`{key}`: cannot descend into a non-object")));
            }
        }
        let obj = cur.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Reads a config file and applies overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: Value = serde_json::from_str(&text)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// An output directory that records the digest of every file written to it.
pub struct OutputDir {
    pub path: PathBuf,
    command: &'static str,
    config_digest: String,
    files: Vec<PathBuf>,
}

impl OutputDir {
    fn create(path: PathBuf, command: &'static str, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = OutputDir {
            path,
            command,
            config_digest: digest(cfg),
            files: Vec::new(),
        };
        out.write("config.json", serde_json::to_string_pretty(cfg)?.as_bytes())?;
        Ok(out)
    }

    fn file(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path.join(rel.as_ref());
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.files.push(rel.as_ref().to_path_buf());
        Ok(p)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(v)?.as_bytes())
    }

    fn finish(self) -> Result<PathBuf> {
        let mut hashes = BTreeMap::new();
        for rel in &self.files {
            let p = self.path.join(rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            hashes.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
        let manifest = json!({
            "command": self.command,
            "config_digest": self.config_digest,
            "files": hashes,
        });
        let p = self.path.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(self.path)
    }
}

fn output_path(args: &ConfigArgs, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    if let Some(p) = &args.out {
        return p.clone();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    root.join(format!("{command}_{}", digest(cfg)))
}

/// Parses arguments already split by clap and runs the command; returns
/// the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let exec = Exec::from_jobs(cli.jobs);
    match cli.command {
        Command::Gen(args) => cmd_gen(&args, exec),
        Command::Baseline { args, verify } => cmd_baseline(&args, verify, exec),
        Command::Train { args, verify } => cmd_train(&args, verify, exec),
        Command::Eval { args, checkpoint } => cmd_eval(&args, &checkpoint, exec),
        Command::Compare { inputs, out } => cmd_compare(&inputs, &out),
    }
}

pub fn cmd_gen(args: &ConfigArgs, exec: Exec) -> Result<PathBuf> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let mut out = OutputDir::create(output_path(args, &cfg, "gen"), "gen", &cfg)?;
    let (train, test) = cfg.datasets(exec)?;
    for (split, set) in [("train", &train), ("test", &test)] {
        for (i, inst) in set.iter().enumerate() {
            let rel = format!("{split}/{i:06}");
            let dir = out.path.join(&rel);
            write_instance(&dir, inst)?;
            for f in ["S.csv", "A.csv", "X.csv", "meta.json"] {
                out.files.push(PathBuf::from(format!("{rel}/{f}")));
            }
        }
    }
    out.write_json(
        "dataset.json",
        &json!({
            "train_size": train.len(),
            "test_size": test.len(),
            "generator": cfg.generator,
        }),
    )?;
    out.finish()
}

fn run_baseline(alg: &AlgorithmConfig, inst: &MixtureInstance) -> Result<RunRecord> {
    match alg {
        AlgorithmConfig::Rls(c) => baseline::rls_run(inst, c),
        AlgorithmConfig::Easi(c) => baseline::easi_run(inst, c),
        _ => Err(Error::Config(format!("`baseline` runs rls or easi, not {}", alg.name()))),
    }
}

/// Oracle comparison for one RLS run: final gain against direct inversion
/// and final separator against the closed-form solution.
fn verify_rls(inst: &MixtureInstance, cfg: &RlsConfig) -> Result<Value> {
    let m = inst.m;
    let (ys, state) = baseline::rls_trajectory(&inst.observations, m, cfg)?;
    let g0 = cfg.init.state(inst.l, m).g;
    let direct = oracle::direct_gain(&ys, cfg.beta, &g0)?;
    let gain_err = (&state.g - &direct).norm() / direct.norm();
    let mut stats = OracleStats::from_initial(&cfg.init.state(inst.l, m))?;
    for t in 0..inst.len {
        stats.push(
            &crate::linalg::column(&inst.observations, t),
            &crate::linalg::column(&ys, t),
            cfg.beta,
        );
    }
    let w_err = match closed_form_w(&stats) {
        Ok(w) => Some((&state.w - &w).norm() / w.norm().max(f64::MIN_POSITIVE)),
        Err(_) => None,
    };
    Ok(json!({ "gain_rel_error": gain_err, "closed_form_w_rel_error": w_err }))
}

pub fn cmd_baseline(args: &ConfigArgs, verify: bool, exec: Exec) -> Result<PathBuf> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let alg = cfg.algorithm.clone();
    if !matches!(alg, AlgorithmConfig::Rls(_) | AlgorithmConfig::Easi(_)) {
        return Err(Error::Config(format!("`baseline` runs rls or easi, not {}", alg.name())));
    }
    let mut out = OutputDir::create(output_path(args, &cfg, "baseline"), "baseline", &cfg)?;
    let (_, test) = cfg.datasets(exec)?;
    let results = exec.map(&test, |_, inst| -> Result<(RunRecord, RunRecord)> {
        let raw = run_baseline(&alg, inst)?;
        let aligned = raw.aligned(&inst.sources)?;
        Ok((raw, aligned))
    });
    let mut raw_records = Vec::new();
    let mut aligned_records = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (mut raw, aligned) = r?;
        aligned.write_csv(&out.file(format!("runs/{i:06}.csv"))?)?;
        raw.algorithm = format!("{}_raw", raw.algorithm);
        raw_records.push(raw);
        aligned_records.push(aligned);
    }
    let curve = Curve::merge(&[convergence_curve(&aligned_records)?, convergence_curve(&raw_records)?])?;
    curve.write_csv(&out.file("curve.csv")?)?;
    let final_mean = |name: &str| curve.column(name).and_then(|c| c.last().copied());
    let mut summary = json!({
        "algorithm": alg.name(),
        "instances": test.len(),
        "final_aligned_mse": final_mean(alg.name()),
        "final_raw_mse": final_mean(&format!("{}_raw", alg.name())),
    });
    if verify {
        let report = match &alg {
            AlgorithmConfig::Rls(c) => {
                let rows = test.iter().map(|inst| verify_rls(inst, c)).collect::<Result<Vec<_>>>()?;
                json!({ "rls": rows })
            }
            _ => json!({ "note": "no oracle for this algorithm" }),
        };
        println!("{}", serde_json::to_string_pretty(&report)?);
        summary["verify"] = report;
    }
    out.write_json("summary.json", &summary)?;
    out.finish()
}

/// Central-difference check of the first training sequence truncated to 5
/// steps; returns the largest relative gradient error.
fn verify_gradients<N: UnrolledNet>(net: &N, inst: &MixtureInstance, cfg: &TrainConfig) -> Result<Value> {
    let short = inst.truncated(inst.len.min(5));
    let (_, grad) = sequence_loss(net, &short, &cfg.loss, &cfg.init, true)?;
    let grad = grad.expect("gradient requested");
    let p0 = net.flatten();
    let fd = oracle::fd_gradient(
        |p| {
            let mut n = net.clone();
            n.set_flat(p)?;
            Ok(sequence_loss(&n, &short, &cfg.loss, &cfg.init, false)?.0)
        },
        &p0,
        FiniteDiffSpec::gradient(),
    )?;
    let worst = grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / b.abs().max(a.abs()).max(1e-7))
        .fold(0.0, f64::max);
    Ok(json!({ "parameters": p0.len(), "max_rel_gradient_error": worst }))
}

fn train_generic<N: UnrolledNet>(
    net: N,
    cfg: &ExperimentConfig,
    out: &mut OutputDir,
    verify: bool,
    exec: Exec,
) -> Result<Value> {
    let (train_set, test_set) = cfg.datasets(exec)?;
    let mut report = Value::Null;
    if verify {
        if let Some(first) = train_set.first() {
            report = verify_gradients(&net, first, &cfg.train)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    let every = cfg.train.checkpoint_every;
    let mut checkpoints = Vec::new();
    let (trained, history) = train::train_with(&net, &train_set, &test_set, &cfg.train, exec, |epoch, n| {
        if every.is_some_and(|k| epoch % k == 0) {
            checkpoints.push((epoch, n.to_checkpoint()));
        }
        Ok(())
    })?;
    for (epoch, ck) in checkpoints {
        ck.save(&out.file(format!("checkpoints/epoch_{epoch:04}.json"))?)?;
    }
    trained.to_checkpoint().save(&out.file("checkpoint.json")?)?;
    history.write_csv(&out.file("history.csv")?)?;
    write_test_curve(&trained, &test_set, cfg, out, exec)?;
    Ok(json!({
        "network": N::NAME,
        "parameters": trained.n_params(),
        "initial_test_mse": history.initial_test_mse,
        "final_test_mse": history.final_test_mse(),
        "verify": report,
    }))
}

fn write_test_curve<N: UnrolledNet>(
    net: &N,
    test: &[MixtureInstance],
    cfg: &ExperimentConfig,
    out: &mut OutputDir,
    exec: Exec,
) -> Result<Option<f64>> {
    let digest = digest(cfg);
    let records = exec
        .map(test, |_, inst| {
            RunRecord::scored(N::NAME, net.predict(&inst.observations, &cfg.train.init)?, &inst.sources, digest.clone())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for (i, r) in records.iter().enumerate() {
        r.write_csv(&out.file(format!("runs/{i:06}.csv"))?)?;
    }
    let curve = convergence_curve(&records)?;
    curve.write_csv(&out.file("curve.csv")?)?;
    Ok(curve.column(N::NAME).and_then(|c| c.last().copied()))
}

pub fn cmd_train(args: &ConfigArgs, verify: bool, exec: Exec) -> Result<PathBuf> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let m = cfg.generator.m;
    let summary_fn = |out: &mut OutputDir| match &cfg.algorithm {
        AlgorithmConfig::DeepRls { net } => train_generic(DeepRlsParams::new(m, net)?, &cfg, out, verify, exec),
        AlgorithmConfig::DeepEasi { net } => train_generic(DeepEasiParams::new(m, net)?, &cfg, out, verify, exec),
        other => Err(Error::Config(format!("`train` needs deep_rls or deep_easi, not {}", other.name()))),
    };
    if let AlgorithmConfig::DeepRls { .. } = cfg.algorithm {
        if matches!(cfg.train.loss, crate::loss::LossConfig::Sure { .. }) {
            return Err(Error::Unsupported("SURE loss with deep_rls".into()));
        }
    }
    let mut out = OutputDir::create(output_path(args, &cfg, "train"), "train", &cfg)?;
    let summary = summary_fn(&mut out)?;
    out.write_json("summary.json", &summary)?;
    out.finish()
}

pub fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, exec: Exec) -> Result<PathBuf> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut out = OutputDir::create(output_path(args, &cfg, "eval"), "eval", &cfg)?;
    let (_, test) = cfg.datasets(exec)?;
    let final_mse = match &ck {
        Checkpoint::DeepRls(p) => write_test_curve(p, &test, &cfg, &mut out, exec)?,
        Checkpoint::DeepEasi(p) => write_test_curve(p, &test, &cfg, &mut out, exec)?,
    };
    out.write_json(
        "summary.json",
        &json!({
            "checkpoint": checkpoint,
            "checkpoint_digest": digest(&ck),
            "instances": test.len(),
            "final_mse": final_mse,
        }),
    )?;
    out.finish()
}

pub fn cmd_compare(inputs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let curves = inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("curve.csv") } else { p.clone() };
            Curve::read_csv(&file)
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = Curve::merge(&curves)?;
    let file = if out.extension().is_some() {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        out.to_path_buf()
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        out.join("curve.csv")
    };
    merged.write_csv(&file)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({ "train": { "epochs": 100 } });
        apply_override(&mut v, "train.epochs=5").unwrap();
        apply_override(&mut v, "algorithm.kind=easi").unwrap();
        apply_override(&mut v, "train.loss={\"kind\":\"sure\"}").unwrap();
        assert_eq!(v["train"]["epochs"], json!(5));
        assert_eq!(v["algorithm"]["kind"], json!("easi"));
        assert_eq!(v["train"]["loss"]["kind"], json!("sure"));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "train.epochs.x=1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Unsupported("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Numerical { step: 1, what: "x".into() }), EXIT_NUMERICAL);
        let io = Error::io("p", std::io::Error::other("x"));
        assert_eq!(exit_code(&io), EXIT_IO);
        let wrapped = Error::Training { epoch: 1, batch: 0, source: Box::new(Error::NearSingularGain { layer: 0, denominator: 0.0 }) };
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig {
            generator: GeneratorConfig::default(),
            algorithm: AlgorithmConfig::DeepEasi { net: NetConfig::default() },
            train: TrainConfig::default(),
            output_dir: None,
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let minimal: ExperimentConfig = serde_json::from_str(r#"{"algorithm":{"kind":"rls","beta":0.99}}"#).unwrap();
        assert_eq!(minimal.algorithm.name(), "rls");
    }
}

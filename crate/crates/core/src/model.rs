//! Linear mixture model `x(t) = A s(t) + n(t)` and synthetic data.
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded
//! with [`SeedableRng::seed_from_u64`]; ChaCha output is specified
//! independently of platform, so a seed reproduces the same instance
//! everywhere this build runs. Draw order within one instance is fixed:
//! the mixing matrix column by column, then sources time step by time step,
//! then noise time step by time step.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, Mat};

/// Source distribution for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceDist {
    /// Uniform on `[-0.5, 0.5]`.
    #[default]
    UniformZeroMean,
    /// Uniform on `[0, 1]`, not zero mean.
    Uniform01,
    Uniform { low: f64, high: f64 },
    Gaussian { std: f64 },
    Laplace { scale: f64 },
}

impl SourceDist {
    /// Zero-mean uniform with unit variance, i.e. on `[-√3, √3]`.
    pub fn unit_variance_uniform() -> Self {
        let h = 3f64.sqrt();
        SourceDist::Uniform { low: -h, high: h }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            SourceDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            SourceDist::Gaussian { std } => std.is_finite() && std > 0.0,
            SourceDist::Laplace { scale } => scale.is_finite() && scale > 0.0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid source distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SourceDist::UniformZeroMean => rng.random::<f64>() - 0.5,
            SourceDist::Uniform01 => rng.random::<f64>(),
            SourceDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            SourceDist::Gaussian { std } => std * Distribution::<f64>::sample(&StandardNormal, rng),
            SourceDist::Laplace { scale } => {
                let u = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub m: usize,
    pub l: usize,
    #[serde(rename = "T", alias = "len")]
    pub len: usize,
    #[serde(default)]
    pub source_dist: SourceDist,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_var() -> f64 {
    1e-3
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            m: 3,
            l: 3,
            len: 300,
            source_dist: SourceDist::UniformZeroMean,
            noise_var: default_noise_var(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.l {
            return Err(Error::Dimension(format!(
                "need 1 <= m <= l, got m={}, l={}",
                self.m, self.l
            )));
        }
        if self.len == 0 {
            return Err(Error::Dimension("sequence length T must be at least 1".into()));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!("noise_var must be >= 0, got {}", self.noise_var)));
        }
        self.source_dist.validate()
    }
}

/// One mixing problem: sources, mixing matrix and the noisy observations.
///
/// Column `t` of `sources` is `s(t)`, column `t` of `observations` is `x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureInstance {
    pub m: usize,
    pub l: usize,
    pub len: usize,
    pub sources: Mat,
    pub mixing: Mat,
    pub noise_var: f64,
    pub observations: Mat,
    pub seed: u64,
}

impl MixtureInstance {
    /// Builds an instance from explicit matrices with no noise.
    pub fn from_parts(sources: Mat, mixing: Mat, observations: Mat, noise_var: f64) -> Result<Self> {
        let (m, len) = sources.shape();
        let l = mixing.nrows();
        if mixing.ncols() != m || observations.shape() != (l, len) {
            return Err(Error::Dimension(format!(
                "S {:?}, A {:?}, X {:?} are inconsistent",
                sources.shape(),
                mixing.shape(),
                observations.shape()
            )));
        }
        Ok(MixtureInstance {
            m,
            l,
            len,
            sources,
            mixing,
            noise_var,
            observations,
            seed: 0,
        })
    }

    /// The first `len` time steps.
    pub fn truncated(&self, len: usize) -> MixtureInstance {
        let len = len.min(self.len);
        MixtureInstance {
            len,
            sources: self.sources.columns(0, len).into_owned(),
            observations: self.observations.columns(0, len).into_owned(),
            ..self.clone()
        }
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<MixtureInstance> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (m, l, len) = (cfg.m, cfg.l, cfg.len);

    let mut mixing = DMatrix::zeros(l, m);
    for v in mixing.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut sources = DMatrix::zeros(m, len);
    for v in sources.iter_mut() {
        *v = cfg.source_dist.sample(&mut rng);
    }
    let mut observations = linalg::matmul(&mixing, &sources);
    if cfg.noise_var > 0.0 {
        let sd = cfg.noise_var.sqrt();
        for v in observations.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sd * n;
        }
    }
    Ok(MixtureInstance {
        m,
        l,
        len,
        sources,
        mixing,
        noise_var: cfg.noise_var,
        observations,
        seed: cfg.seed,
    })
}

/// `n` per-instance seeds derived from one dataset seed.
pub fn derive_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n` independent instances, each with a fresh mixing matrix.
pub fn generate_dataset(cfg: &GeneratorConfig, n: usize, exec: Exec) -> Result<Vec<MixtureInstance>> {
    cfg.validate()?;
    let seeds = derive_seeds(cfg.seed, n);
    exec.map(&seeds, |_, &seed| generate(&GeneratorConfig { seed, ..cfg.clone() }))
        .into_iter()
        .collect()
}

/// Sample excess kurtosis `E[(s-μ)^4]/σ^4 - 3`.
pub fn empirical_kurtosis(signal: &[f64]) -> Result<f64> {
    let n = signal.len();
    if n < 4 {
        return Err(Error::Degenerate(format!("need at least 4 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = signal.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in signal {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m4 /= nf;
    let scale = signal.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(m2 > (1e-9 * scale).powi(2)) {
        return Err(Error::Degenerate(format!(
            "variance {m2:e} is negligible relative to magnitude {scale:e}"
        )));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceMeta {
    m: usize,
    l: usize,
    #[serde(rename = "T")]
    len: usize,
    noise_var: f64,
    seed: u64,
}

pub(crate) fn write_matrix_csv(path: &Path, mat: &Mat) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    if mat.ncols() > 0 {
        for r in 0..mat.nrows() {
            w.write_record(mat.row(r).iter().map(|v| format!("{v:.16e}")))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_matrix_csv(path: &Path, rows: usize, cols: usize) -> Result<Mat> {
    let mut mat = DMatrix::zeros(rows, cols);
    if cols == 0 || rows == 0 {
        return Ok(mat);
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut seen = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if r >= rows || rec.len() != cols {
            return Err(Error::Dimension(format!(
                "{} does not hold a {rows}x{cols} matrix",
                path.display()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            mat[(r, c)] = field.trim().parse().map_err(|_| {
                Error::Config(format!("{}: bad number {field:?}", path.display()))
            })?;
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Dimension(format!(
            "{} has {seen} rows, expected {rows}",
            path.display()
        )));
    }
    Ok(mat)
}

/// Writes `S.csv`, `A.csv`, `X.csv` and `meta.json` into `dir`.
pub fn write_instance(dir: &Path, inst: &MixtureInstance) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_csv(&dir.join("S.csv"), &inst.sources)?;
    write_matrix_csv(&dir.join("A.csv"), &inst.mixing)?;
    write_matrix_csv(&dir.join("X.csv"), &inst.observations)?;
    let meta = InstanceMeta {
        m: inst.m,
        l: inst.l,
        len: inst.len,
        noise_var: inst.noise_var,
        seed: inst.seed,
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))
}

pub fn read_instance(dir: &Path) -> Result<MixtureInstance> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: InstanceMeta = serde_json::from_str(&text)?;
    Ok(MixtureInstance {
        m: meta.m,
        l: meta.l,
        len: meta.len,
        sources: read_matrix_csv(&dir.join("S.csv"), meta.m, meta.len)?,
        mixing: read_matrix_csv(&dir.join("A.csv"), meta.l, meta.m)?,
        noise_var: meta.noise_var,
        observations: read_matrix_csv(&dir.join("X.csv"), meta.l, meta.len)?,
        seed: meta.seed,
    })
}

//! Scoring: average MSE, permutation/sign alignment and convergence curves.

use std::collections::BTreeMap;
use std::path::Path;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Outputs of one run plus per-step squared errors against the sources.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algorithm: String,
    /// `m×T`, column `t` is `y(t)`.
    pub y: Mat,
    pub sq_errors: Option<Vec<f64>>,
    pub config_digest: String,
}

fn check_shapes(op: &'static str, y: &Mat, s: &Mat) -> Result<()> {
    if y.shape() == s.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("y {:?} vs s {:?}", y.shape(), s.shape())))
    }
}

/// `‖s(t) - y(t)‖²` for every `t`.
pub fn step_errors(y: &Mat, s: &Mat) -> Result<Vec<f64>> {
    check_shapes("step_errors", y, s)?;
    Ok((0..y.ncols())
        .map(|t| (s.column(t) - y.column(t)).norm_squared())
        .collect())
}

impl RunRecord {
    pub fn unscored(algorithm: impl Into<String>, y: Mat, config_digest: String) -> Self {
        RunRecord {
            algorithm: algorithm.into(),
            y,
            sq_errors: None,
            config_digest,
        }
    }

    pub fn scored(algorithm: impl Into<String>, y: Mat, s: &Mat, config_digest: String) -> Result<Self> {
        let sq_errors = Some(step_errors(&y, s)?);
        Ok(RunRecord {
            algorithm: algorithm.into(),
            y,
            sq_errors,
            config_digest,
        })
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    /// Re-scores against `s` after the best permutation/sign alignment over
    /// the whole run.
    pub fn aligned(&self, s: &Mat) -> Result<RunRecord> {
        let (alignment, _) = best_alignment(&self.y, s)?;
        RunRecord::scored(self.algorithm.clone(), alignment.apply(&self.y), s, self.config_digest.clone())
    }

    /// Columns `t, y_1..y_m` and, when scored, `sq_error, cum_avg_mse`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let m = self.y.nrows();
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((1..=m).map(|i| format!("y_{i}")));
        if self.sq_errors.is_some() {
            header.push("sq_error".into());
            header.push("cum_avg_mse".into());
        }
        w.write_record(&header)?;
        let mut running = 0.0;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.y.column(t).iter().map(|v| format!("{v:.16e}")));
            if let Some(errs) = &self.sq_errors {
                running += errs[t];
                row.push(format!("{:.16e}", errs[t]));
                row.push(format!("{:.16e}", running / (t + 1) as f64));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `(1/T) Σ_t ‖s(t) - y(t)‖²`; zero for an empty sequence.
pub fn average_mse(y: &Mat, s: &Mat) -> Result<f64> {
    let errs = step_errors(y, s)?;
    if errs.is_empty() {
        return Ok(0.0);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Row `i` of the aligned output is `signs[i] · y[perm[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Alignment {
    pub fn identity(m: usize) -> Self {
        Alignment {
            perm: (0..m).collect(),
            signs: vec![1.0; m],
        }
    }

    pub fn apply(&self, y: &Mat) -> Mat {
        Mat::from_fn(y.nrows(), y.ncols(), |i, t| self.signs[i] * y[(self.perm[i], t)])
    }
}

pub const MAX_ALIGNMENT_SOURCES: usize = 6;

/// Exhaustive search over all `m!·2^m` permutation/sign transforms of the
/// rows of `y`, minimizing the average MSE against `s`.
///
/// The sign only affects the pairing's own cost, so it is chosen per
/// `(source, output)` pair before enumerating permutations.
pub fn best_alignment(y: &Mat, s: &Mat) -> Result<(Alignment, f64)> {
    check_shapes("best_alignment", y, s)?;
    let (m, len) = y.shape();
    if m > MAX_ALIGNMENT_SOURCES {
        return Err(Error::Dimension(format!(
            "exhaustive alignment supports at most {MAX_ALIGNMENT_SOURCES} sources, got {m}"
        )));
    }
    // cost[i][j] = (best sign, Σ_t (s_i - sign·y_j)²)
    let mut cost = vec![vec![(1.0, 0.0); m]; m];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            let pair = |sign: f64| (0..len).map(|t| (s[(i, t)] - sign * y[(j, t)]).powi(2)).sum::<f64>();
            let (plus, minus) = (pair(1.0), pair(-1.0));
            *c = if minus < plus { (-1.0, minus) } else { (1.0, plus) };
        }
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..m).permutations(m) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j].1).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.unwrap_or((Vec::new(), 0.0));
    let signs = perm.iter().enumerate().map(|(i, &j)| cost[i][j].0).collect();
    let mse = if len == 0 { 0.0 } else { total / len as f64 };
    Ok((Alignment { perm, signs }, mse))
}

/// Running mean of `errors` up to each step.
pub fn cumulative_mean(errors: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    errors
        .iter()
        .enumerate()
        .map(|(t, e)| {
            acc += e;
            acc / (t + 1) as f64
        })
        .collect()
}

/// A table of per-algorithm curves over `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(&self.values[i])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.values.iter().map(|c| format!("{:.16e}", c[t])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Curve> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Config(format!("{}: first column must be `t`", path.display())));
        }
        let columns: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut values = vec![Vec::new(); columns.len()];
        for rec in r.records() {
            let rec = rec?;
            for (c, field) in rec.iter().skip(1).enumerate() {
                let v = field
                    .parse()
                    .map_err(|_| Error::Config(format!("{}: bad number {field:?}", path.display())))?;
                values[c].push(v);
            }
        }
        Ok(Curve { columns, values })
    }

    /// Puts several curve tables side by side; all must share `T`.
    pub fn merge(curves: &[Curve]) -> Result<Curve> {
        let lens: Vec<usize> = curves.iter().map(Curve::len).collect();
        if lens.is_empty() {
            return Err(Error::Config("nothing to merge".into()));
        }
        if lens.iter().any(|&l| l != lens[0]) {
            return Err(Error::Dimension(format!("curve lengths differ: {lens:?}")));
        }
        let mut out = Curve {
            columns: Vec::new(),
            values: Vec::new(),
        };
        for c in curves {
            for (name, vals) in c.columns.iter().zip(&c.values) {
                let mut unique = name.clone();
                let mut k = 2;
                while out.columns.contains(&unique) {
                    unique = format!("{name}_{k}");
                    k += 1;
                }
                out.columns.push(unique);
                out.values.push(vals.clone());
            }
        }
        Ok(out)
    }
}

/// Cumulative average MSE per algorithm, averaged over all records that
/// share an algorithm id. Column order follows first appearance.
pub fn convergence_curve(records: &[RunRecord]) -> Result<Curve> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut len = None;
    for r in records {
        let errs = r.sq_errors.as_ref().ok_or_else(|| {
            Error::Config(format!("record for {} carries no per-step errors", r.algorithm))
        })?;
        if *len.get_or_insert(errs.len()) != errs.len() {
            return Err(Error::Dimension(format!(
                "record lengths differ: {} vs {}",
                len.unwrap_or(0),
                errs.len()
            )));
        }
        if !groups.contains_key(&r.algorithm) {
            order.push(r.algorithm.clone());
        }
        groups.entry(r.algorithm.clone()).or_default().push(cumulative_mean(errs));
    }
    let values = order
        .iter()
        .map(|alg| mean_curve(&groups[alg]))
        .collect();
    Ok(Curve { columns: order, values })
}

/// Pointwise mean of equally long curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let n = curves.len() as f64;
    (0..first.len())
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / n)
        .collect()
}

/// First 1-based `t` at which `curve` is at or below `level`.
pub fn first_reaching(curve: &[f64], level: f64) -> Option<usize> {
    curve.iter().position(|&v| v <= level).map(|i| i + 1)
}

//! Deep RLS and Deep EASI: the classical recursions unrolled one layer per
//! time step, with a trainable scalar per layer (forgetting factor `ω_k` or
//! step size `λ_t`) and a trainable vector nonlinearity per layer.
//!
//! Forward passes are recorded on an [`autograd::Tape`] so any scalar loss of
//! the outputs can be differentiated with respect to every parameter. With
//! `shared = true` a single scalar and a single nonlinearity serve all layers
//! and the network runs for any sequence length.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::baseline::{InitSpec, Nonlinearity};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Denominators `ω_k + yᵀh` closer to zero than this abort the forward pass.
pub const MIN_GAIN_DENOMINATOR: f64 = 1e-12;

mod mat_serde {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        /// row-major
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "{}x{} matrix with {} entries",
                r.rows,
                r.cols,
                r.data.len()
            )));
        }
        Ok(Mat::from_row_slice(r.rows, r.cols, &r.data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(with = "mat_serde")]
    pub weight: Mat,
    #[serde(with = "mat_serde")]
    pub bias: Mat,
}

/// Fully connected network; hidden layers use `activation`, the output
/// layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpParams {
    /// A single linear layer computing the identity.
    pub fn identity(m: usize) -> Self {
        MlpParams {
            layers: vec![DenseLayer {
                weight: Mat::identity(m, m),
                bias: Mat::zeros(m, 1),
            }],
            activation: Activation::Tanh,
        }
    }

    /// `m → hidden… → m` with every weight and bias zero.
    pub fn zeros(m: usize, hidden: &[usize], activation: Activation) -> Self {
        let dims: Vec<usize> = std::iter::once(m).chain(hidden.iter().copied()).chain([m]).collect();
        MlpParams {
            layers: dims
                .windows(2)
                .map(|w| DenseLayer {
                    weight: Mat::zeros(w[1], w[0]),
                    bias: Mat::zeros(w[1], 1),
                })
                .collect(),
            activation,
        }
    }

    /// Gaussian weights with standard deviation `1/√fan_in`, zero biases.
    pub fn random(m: usize, hidden: &[usize], activation: Activation, rng: &mut ChaCha20Rng) -> Self {
        let mut net = Self::zeros(m, hidden, activation);
        for layer in &mut net.layers {
            let sd = 1.0 / (layer.weight.ncols() as f64).sqrt();
            for v in layer.weight.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = sd * z;
            }
        }
        net
    }

    /// Random hidden layers (first layer scaled by `input_scale`), with the
    /// output layer fitted by least squares so that the network approximates
    /// `target` applied elementwise on `[-range, range]^m`.
    pub fn fitted(
        m: usize,
        hidden: &[usize],
        activation: Activation,
        target: Nonlinearity,
        range: f64,
        input_scale: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("a fitted MLP needs at least one hidden layer".into()));
        }
        let mut net = Self::random(m, hidden, activation, rng);
        net.layers[0].weight *= input_scale;
        let n = 64 * (m + hidden[hidden.len() - 1] + 1);
        let dist = Uniform::new_inclusive(-range, range).map_err(|e| Error::Config(e.to_string()))?;
        let inputs = Mat::from_fn(m, n, |_, _| dist.sample(rng));
        let last = net.layers.len() - 1;
        let mut feats = inputs.clone();
        for layer in &net.layers[..last] {
            feats = activate(activation, &(&layer.weight * &feats + &layer.bias * Mat::from_element(1, n, 1.0)));
        }
        let k = feats.nrows();
        // [feats; 1]ᵀ [W | b]ᵀ = targetᵀ
        let design = Mat::from_fn(n, k + 1, |i, j| if j < k { feats[(j, i)] } else { 1.0 });
        let targets = target.apply(&inputs).transpose();
        let sol = design
            .svd(true, true)
            .solve(&targets, 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let coef = sol.transpose();
        net.layers[last].weight = coef.columns(0, k).into_owned();
        net.layers[last].bias = coef.columns(k, 1).into_owned();
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("MLP has no layers".into()));
        }
        let mut width = m;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.ncols() != width || l.bias.shape() != (l.weight.nrows(), 1) {
                return Err(Error::Dimension(format!(
                    "MLP layer {i}: weight {:?}, bias {:?}, incoming width {width}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            width = l.weight.nrows();
        }
        if width != m {
            return Err(Error::Dimension(format!("MLP output width {width}, expected {m}")));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, v: &Mat) -> Mat {
        let last = self.layers.len() - 1;
        let mut cur = v.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = linalg::matmul(&l.weight, &cur) + &l.bias;
            if i < last {
                cur = activate(self.activation, &cur);
            }
        }
        cur
    }
}

fn activate(a: Activation, v: &Mat) -> Mat {
    match a {
        Activation::Tanh => v.map(f64::tanh),
        Activation::Relu => v.map(|x| if x > 0.0 { x } else { 0.0 }),
    }
}

/// Per-layer vector nonlinearity: a trainable MLP or a fixed classical map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerMap {
    Mlp(MlpParams),
    Fixed { nonlinearity: Nonlinearity },
}

impl LayerMap {
    fn n_params(&self) -> usize {
        match self {
            LayerMap::Mlp(p) => p.n_params(),
            LayerMap::Fixed { .. } => 0,
        }
    }
}

/// Tape handles for one layer map's parameters.
#[derive(Debug, Clone)]
pub enum BoundMap {
    Mlp { layers: Vec<(Var, Var)>, activation: Activation },
    Fixed(Nonlinearity),
}

/// Every trainable parameter of a network as tape leaves, in flattening order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub scalars: Vec<Var>,
    pub maps: Vec<BoundMap>,
}

impl BoundParams {
    /// Gradient in the same order as [`UnrolledNet::flatten`].
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &s in &self.scalars {
            out.push(grads.get(s).map_or(0.0, |g| g[0]));
        }
        for map in &self.maps {
            if let BoundMap::Mlp { layers, .. } = map {
                for &(w, b) in layers {
                    push_row_major(&mut out, &grads.wrt_or_zeros(w, tape.shape(w)));
                    push_row_major(&mut out, &grads.wrt_or_zeros(b, tape.shape(b)));
                }
            }
        }
        out
    }

    fn layer(&self, k: usize) -> (Var, &BoundMap) {
        let s = self.scalars[k.min(self.scalars.len() - 1)];
        let m = &self.maps[k.min(self.maps.len() - 1)];
        (s, m)
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &Mat) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

fn take_row_major(flat: &[f64], pos: &mut usize, m: &mut Mat) {
    let cols = m.ncols();
    for r in 0..m.nrows() {
        for c in 0..cols {
            m[(r, c)] = flat[*pos];
            *pos += 1;
        }
    }
}

/// Applies a bound layer map to `v` on the tape.
pub fn apply_map(tape: &mut Tape, map: &BoundMap, v: Var) -> Result<Var> {
    match map {
        BoundMap::Fixed(Nonlinearity::Linear) => Ok(v),
        BoundMap::Fixed(Nonlinearity::Cubic) => tape.cube(v),
        BoundMap::Fixed(Nonlinearity::Tanh { scale }) => {
            let s = tape.scale(v, *scale)?;
            tape.tanh(s)
        }
        BoundMap::Mlp { layers, activation } => mlp_forward(tape, layers, *activation, v),
    }
}

/// Affine layers with `activation` between them; linear output.
pub fn mlp_forward(tape: &mut Tape, layers: &[(Var, Var)], activation: Activation, v: Var) -> Result<Var> {
    let mut cur = v;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(w, cur)?;
        cur = tape.add(z, b)?;
        if i + 1 < layers.len() {
            cur = match activation {
                Activation::Tanh => tape.tanh(cur)?,
                Activation::Relu => tape.relu(cur)?,
            };
        }
    }
    Ok(cur)
}

/// Tape-valued result of an unrolled forward pass.
#[derive(Debug, Clone)]
pub struct UnrolledOutput {
    /// `y` of every layer, each `m×1`.
    pub y: Vec<Var>,
    /// The separator each layer's output was computed from (`W(k-1)` for
    /// Deep RLS, `W(t)` for Deep EASI).
    pub w_used: Vec<Var>,
    pub final_w: Var,
    /// Per-layer forgetting factors or step sizes actually applied.
    pub layer_scalars: Vec<f64>,
}

impl UnrolledOutput {
    /// Outputs as a plain `m×T` matrix.
    pub fn y_matrix(&self, tape: &Tape, m: usize) -> Mat {
        let mut out = Mat::zeros(m, self.y.len());
        for (t, &y) in self.y.iter().enumerate() {
            out.set_column(t, &tape.value(y).column(0));
        }
        out
    }
}

/// Common parameter layout of both unrolled networks.
pub trait UnrolledNet: Clone + Send + Sync {
    const NAME: &'static str;
    /// Whether the SURE loss is defined for this network.
    const SUPPORTS_SURE: bool;

    fn m(&self) -> usize;
    fn shared(&self) -> bool;
    fn depth(&self) -> usize;
    /// `ω_k` or `λ_t`: one entry when shared, `depth` otherwise.
    fn scalars(&self) -> &[f64];
    fn scalars_mut(&mut self) -> &mut Vec<f64>;
    fn maps(&self) -> &[LayerMap];
    fn maps_mut(&mut self) -> &mut Vec<LayerMap>;

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: &Mat, init: &InitSpec) -> Result<UnrolledOutput>;

    fn to_checkpoint(&self) -> Checkpoint;

    fn validate(&self) -> Result<()> {
        let want = if self.shared() { 1 } else { self.depth() };
        if self.scalars().len() != want || self.maps().len() != want {
            return Err(Error::Dimension(format!(
                "{}: expected {want} layer parameter sets (shared={}, depth={}), got {} scalars and {} maps",
                Self::NAME,
                self.shared(),
                self.depth(),
                self.scalars().len(),
                self.maps().len()
            )));
        }
        for map in self.maps() {
            if let LayerMap::Mlp(p) = map {
                p.validate(self.m())?;
            }
        }
        Ok(())
    }

    /// Checks that a sequence of `len` steps can be unrolled.
    fn check_len(&self, len: usize) -> Result<()> {
        if !self.shared() && len > self.depth() {
            return Err(Error::Dimension(format!(
                "{} has {} unshared layers but the sequence has {len} steps",
                Self::NAME,
                self.depth()
            )));
        }
        Ok(())
    }

    fn n_params(&self) -> usize {
        self.scalars().len() + self.maps().iter().map(LayerMap::n_params).sum::<usize>()
    }

    /// Scalars first, then each MLP's layers as row-major weight then bias.
    fn flatten(&self) -> Vec<f64> {
        let mut out = self.scalars().to_vec();
        for map in self.maps() {
            if let LayerMap::Mlp(p) = map {
                for l in &p.layers {
                    push_row_major(&mut out, &l.weight);
                    push_row_major(&mut out, &l.bias);
                }
            }
        }
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "{} has {} parameters, got {}",
                Self::NAME,
                self.n_params(),
                flat.len()
            )));
        }
        let ns = self.scalars().len();
        self.scalars_mut().copy_from_slice(&flat[..ns]);
        let mut pos = ns;
        for map in self.maps_mut() {
            if let LayerMap::Mlp(p) = map {
                for l in &mut p.layers {
                    take_row_major(flat, &mut pos, &mut l.weight);
                    take_row_major(flat, &mut pos, &mut l.bias);
                }
            }
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            scalars: self.scalars().iter().map(|&s| tape.param_scalar(s)).collect(),
            maps: self
                .maps()
                .iter()
                .map(|map| match map {
                    LayerMap::Mlp(p) => BoundMap::Mlp {
                        layers: p
                            .layers
                            .iter()
                            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                            .collect(),
                        activation: p.activation,
                    },
                    LayerMap::Fixed { nonlinearity } => BoundMap::Fixed(*nonlinearity),
                })
                .collect(),
        }
    }

    /// Outputs `m×T` for observations `x` without keeping the tape.
    fn predict(&self, x: &Mat, init: &InitSpec) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, x, init)?;
        Ok(out.y_matrix(&tape, self.m()))
    }
}

/// How the per-layer MLPs start out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    #[serde(default = "yes")]
    pub shared: bool,
    /// Unroll depth; only binding for unshared networks.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Initial `ω` (Deep RLS) or `λ` (Deep EASI); network default if absent.
    #[serde(default)]
    pub init_scalar: Option<f64>,
    /// Classical map the MLPs are fitted to; network default if absent.
    #[serde(default)]
    pub fit_target: Option<Nonlinearity>,
    /// Half-width of the fitting box.
    #[serde(default = "default_fit_range")]
    pub fit_range: f64,
    /// Multiplies the first layer's random weights; small values keep the
    /// hidden units near their linear regime.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}
fn default_depth() -> usize {
    300
}
fn default_hidden() -> Vec<usize> {
    vec![8]
}
fn default_fit_range() -> f64 {
    2.0
}
fn default_input_scale() -> f64 {
    0.1
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            shared: true,
            depth: default_depth(),
            hidden: default_hidden(),
            activation: Activation::Tanh,
            init_scalar: None,
            fit_target: None,
            fit_range: default_fit_range(),
            input_scale: default_input_scale(),
            seed: 0,
        }
    }
}

fn build_layers(m: usize, cfg: &NetConfig, scalar: f64, target: Nonlinearity) -> Result<(Vec<f64>, Vec<LayerMap>)> {
    let n = if cfg.shared { 1 } else { cfg.depth };
    if n == 0 {
        return Err(Error::Config("unroll depth must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let maps = (0..n)
        .map(|_| {
            if cfg.hidden.is_empty() && target == Nonlinearity::Linear {
                Ok(LayerMap::Mlp(MlpParams::identity(m)))
            } else {
                MlpParams::fitted(m, &cfg.hidden, cfg.activation, target, cfg.fit_range, cfg.input_scale, &mut rng).map(LayerMap::Mlp)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((vec![scalar; n], maps))
}

fn check_finite(step: usize, tape: &Tape, v: Var, what: &str) -> Result<()> {
    if linalg::all_finite(tape.value(v)) {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            what: format!("non-finite {what}"),
        })
    }
}

fn check_input(x: &Mat, m: usize) -> Result<()> {
    if x.nrows() < m {
        return Err(Error::Dimension(format!("{} observations for {m} sources", x.nrows())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepRlsParams {
    pub m: usize,
    pub shared: bool,
    pub depth: usize,
    /// Forgetting factors `ω_k`.
    pub omegas: Vec<f64>,
    pub maps: Vec<LayerMap>,
}

impl DeepRlsParams {
    /// MLPs fitted to the identity (or `cfg.fit_target`), `ω = 0.99`.
    pub fn new(m: usize, cfg: &NetConfig) -> Result<Self> {
        let target = cfg.fit_target.unwrap_or(Nonlinearity::Linear);
        let (omegas, maps) = build_layers(m, cfg, cfg.init_scalar.unwrap_or(0.99), target)?;
        let p = DeepRlsParams {
            m,
            shared: cfg.shared,
            depth: cfg.depth,
            omegas,
            maps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Classical RLS as a network: fixed `g` and `ω_k = beta` everywhere.
    pub fn classical(m: usize, beta: f64, g: Nonlinearity) -> Self {
        DeepRlsParams {
            m,
            shared: true,
            depth: 1,
            omegas: vec![beta],
            maps: vec![LayerMap::Fixed { nonlinearity: g }],
        }
    }
}

impl UnrolledNet for DeepRlsParams {
    const NAME: &'static str = "deep_rls";
    const SUPPORTS_SURE: bool = false;

    fn m(&self) -> usize {
        self.m
    }
    fn shared(&self) -> bool {
        self.shared
    }
    fn depth(&self) -> usize {
        self.depth
    }
    fn scalars(&self) -> &[f64] {
        &self.omegas
    }
    fn scalars_mut(&mut self) -> &mut Vec<f64> {
        &mut self.omegas
    }
    fn maps(&self) -> &[LayerMap] {
        &self.maps
    }
    fn maps_mut(&mut self) -> &mut Vec<LayerMap> {
        &mut self.maps
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: &Mat, init: &InitSpec) -> Result<UnrolledOutput> {
        deep_rls_forward(tape, self, bound, x, init)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::DeepRls(self.clone())
    }
}

/// Unrolled RLS: layer `k` consumes `x(k)` and applies
///
/// ```text
/// y = g_k(Wᵀx)   h = G y   f = h / (ω_k + yᵀh)
/// G ← (G - f hᵀ) / ω_k   e = x - W y   W ← W + e fᵀ
/// ```
pub fn deep_rls_forward(
    tape: &mut Tape,
    params: &DeepRlsParams,
    bound: &BoundParams,
    x: &Mat,
    init: &InitSpec,
) -> Result<UnrolledOutput> {
    let m = params.m;
    check_input(x, m)?;
    params.check_len(x.ncols())?;
    let state = init.state(x.nrows(), m);
    let mut w = tape.constant(state.w);
    let mut g = tape.constant(state.g);
    let len = x.ncols();
    let mut out = UnrolledOutput {
        y: Vec::with_capacity(len),
        w_used: Vec::with_capacity(len),
        final_w: w,
        layer_scalars: Vec::with_capacity(len),
    };
    for k in 0..len {
        let (omega, map) = bound.layer(k);
        let omega_val = tape.scalar(omega);
        if !omega_val.is_finite() {
            return Err(Error::Numerical {
                step: k,
                what: format!("forgetting factor {omega_val}"),
            });
        }
        let xk = tape.constant(linalg::column(x, k));
        let v = tape.tmatvec(w, xk)?;
        let y = apply_map(tape, map, v)?;
        check_finite(k, tape, y, "output y")?;
        let h = tape.matmul(g, y)?;
        let yh = tape.dot(y, h)?;
        let denom = tape.add(omega, yh)?;
        let d = tape.scalar(denom);
        if !(d.abs() >= MIN_GAIN_DENOMINATOR) {
            return Err(Error::NearSingularGain { layer: k, denominator: d });
        }
        let f = tape.div_scalar(h, denom)?;
        let fh = tape.outer(f, h)?;
        let gm = tape.sub(g, fh)?;
        let g_new = tape.div_scalar(gm, omega)?;
        check_finite(k, tape, g_new, "inverse correlation G")?;
        let wy = tape.matmul(w, y)?;
        let e = tape.sub(xk, wy)?;
        let ef = tape.outer(e, f)?;
        let w_new = tape.add(w, ef)?;
        check_finite(k, tape, w_new, "separator W")?;

        out.y.push(y);
        out.w_used.push(w);
        out.layer_scalars.push(omega_val);
        w = w_new;
        g = g_new;
    }
    out.final_w = w;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepEasiParams {
    pub m: usize,
    pub shared: bool,
    pub depth: usize,
    /// Step sizes `λ_t`.
    pub lambdas: Vec<f64>,
    pub maps: Vec<LayerMap>,
}

impl DeepEasiParams {
    /// MLPs fitted to the cubic (or `cfg.fit_target`), `λ = 0.01`.
    pub fn new(m: usize, cfg: &NetConfig) -> Result<Self> {
        let target = cfg.fit_target.unwrap_or(Nonlinearity::Cubic);
        let (lambdas, maps) = build_layers(m, cfg, cfg.init_scalar.unwrap_or(0.01), target)?;
        let p = DeepEasiParams {
            m,
            shared: cfg.shared,
            depth: cfg.depth,
            lambdas,
            maps,
        };
        p.validate()?;
        Ok(p)
    }

    /// Classical EASI as a network: fixed `g`, constant step size.
    pub fn classical(m: usize, step_size: f64, g: Nonlinearity) -> Self {
        DeepEasiParams {
            m,
            shared: true,
            depth: 1,
            lambdas: vec![step_size],
            maps: vec![LayerMap::Fixed { nonlinearity: g }],
        }
    }
}

impl UnrolledNet for DeepEasiParams {
    const NAME: &'static str = "deep_easi";
    const SUPPORTS_SURE: bool = true;

    fn m(&self) -> usize {
        self.m
    }
    fn shared(&self) -> bool {
        self.shared
    }
    fn depth(&self) -> usize {
        self.depth
    }
    fn scalars(&self) -> &[f64] {
        &self.lambdas
    }
    fn scalars_mut(&mut self) -> &mut Vec<f64> {
        &mut self.lambdas
    }
    fn maps(&self) -> &[LayerMap] {
        &self.maps
    }
    fn maps_mut(&mut self) -> &mut Vec<LayerMap> {
        &mut self.maps
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: &Mat, init: &InitSpec) -> Result<UnrolledOutput> {
        deep_easi_forward(tape, self, bound, x, init)
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::DeepEasi(self.clone())
    }
}

/// Unrolled EASI: `y(t) = W(t)ᵀx(t)`, then
/// `W ← W - λ_t W H_tᵀ` with `H_t = yyᵀ - I + g_t(y)yᵀ - y g_t(y)ᵀ`.
pub fn deep_easi_forward(
    tape: &mut Tape,
    params: &DeepEasiParams,
    bound: &BoundParams,
    x: &Mat,
    init: &InitSpec,
) -> Result<UnrolledOutput> {
    let m = params.m;
    check_input(x, m)?;
    params.check_len(x.ncols())?;
    let mut w = tape.constant(init.state(x.nrows(), m).w);
    let ident = tape.constant(Mat::identity(m, m));
    let len = x.ncols();
    let mut out = UnrolledOutput {
        y: Vec::with_capacity(len),
        w_used: Vec::with_capacity(len),
        final_w: w,
        layer_scalars: Vec::with_capacity(len),
    };
    for t in 0..len {
        let (lambda, map) = bound.layer(t);
        let xt = tape.constant(linalg::column(x, t));
        let y = tape.tmatvec(w, xt)?;
        check_finite(t, tape, y, "output y")?;
        let gy = apply_map(tape, map, y)?;
        let yy = tape.outer(y, y)?;
        let a = tape.sub(yy, ident)?;
        let gyt = tape.outer(gy, y)?;
        let b = tape.add(a, gyt)?;
        let ygt = tape.outer(y, gy)?;
        let h = tape.sub(b, ygt)?;
        let ht = tape.transpose(h)?;
        let wh = tape.matmul(w, ht)?;
        let delta = tape.mul_scalar(lambda, wh)?;
        let w_new = tape.sub(w, delta)?;
        check_finite(t, tape, w_new, "separator W")?;

        out.y.push(y);
        out.w_used.push(w);
        out.layer_scalars.push(tape.scalar(lambda));
        w = w_new;
    }
    out.final_w = w;
    Ok(out)
}

/// Either network, tagged for checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum Checkpoint {
    DeepRls(DeepRlsParams),
    DeepEasi(DeepEasiParams),
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        match &ck {
            Checkpoint::DeepRls(p) => p.validate()?,
            Checkpoint::DeepEasi(p) => p.validate()?,
        }
        Ok(ck)
    }
}

//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation eagerly: the value is computed and
//! cached when the node is created, and the node only refers to earlier
//! nodes, so insertion order is a topological order. [`Tape::backward`]
//! sweeps that order in reverse, accumulating adjoints additively.
//!
//! Scalars are `1×1` and vectors are `n×1` matrices. Values are combined
//! through the kernels in [`crate::linalg`], so a recursion recorded on a
//! tape reproduces the plain-matrix version bit for bit.
//!
//! ```
//! use adasep::autograd::Tape;
//! use nalgebra::DMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(DMatrix::from_element(1, 1, 3.0));
//! let y = tape.cube(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x)[0], 27.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub const DEFAULT_NODE_CAP: usize = 10_000_000;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    /// `wᵀ x`
    TMatVec(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Cube(usize),
    Scale(usize, f64),
    AddConst(usize),
    /// scalar × matrix
    MulScalar(usize, usize),
    /// matrix ÷ scalar
    DivScalar(usize, usize),
    Outer(usize, usize),
    Dot(usize, usize),
    Trace(usize),
    SqNorm(usize),
    Sum(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    cap: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_cap(DEFAULT_NODE_CAP)
    }

    pub fn with_cap(cap: usize) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            cap,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Result<Var> {
        if self.nodes.len() >= self.cap {
            return Err(Error::TapeCap(self.cap));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn own(&self, v: Var) -> Result<usize> {
        if v.tape == self.id {
            Ok(v.idx)
        } else {
            Err(Error::CrossTape)
        }
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true).expect("tape cap reached while adding a leaf")
    }

    /// A constant input; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false).expect("tape cap reached while adding a leaf")
    }

    pub fn param_scalar(&mut self, v: f64) -> Var {
        self.param(Mat::from_element(1, 1, v))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Mat::from_element(1, 1, v))
    }

    fn unary(&mut self, a: Var, value: impl FnOnce(&Mat) -> Mat, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.own(a)?;
        let v = value(&self.nodes[ia].value);
        let g = self.grad_of(&[ia]);
        self.push(v, op(ia), g)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        compatible: impl FnOnce(&Mat, &Mat) -> bool,
        value: impl FnOnce(&Mat, &Mat) -> Mat,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.own(a)?, self.own(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !compatible(va, vb) {
            return Err(Error::shape(name, format!("{:?} and {:?}", va.shape(), vb.shape())));
        }
        let v = value(va, vb);
        let g = self.grad_of(&[ia, ib]);
        self.push(v, op(ia, ib), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x.shape() == y.shape(), |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x.shape() == y.shape(), |x, y| x - y, Op::Sub)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "matmul", |x, y| x.ncols() == y.nrows(), linalg::matmul, Op::MatMul)
    }

    /// `wᵀ x` for a column vector `x`.
    pub fn tmatvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.binary(
            w,
            x,
            "tmatvec",
            |w, x| w.nrows() == x.nrows() && x.ncols() == 1,
            linalg::tmatvec,
            Op::TMatVec,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.transpose(), Op::Transpose)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.map(|v| if v > 0.0 { v } else { 0.0 }), Op::Relu)
    }

    pub fn cube(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.map(|v| v * v * v), Op::Cube)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x.map(|v| c * v), |i| Op::Scale(i, c))
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x.map(|v| v + c), |i| Op::AddConst(i))
    }

    /// `s · m` for a scalar node `s`.
    pub fn mul_scalar(&mut self, s: Var, m: Var) -> Result<Var> {
        self.binary(
            s,
            m,
            "mul_scalar",
            |s, _| s.shape() == (1, 1),
            |s, m| {
                let s = s[0];
                m.map(|v| s * v)
            },
            Op::MulScalar,
        )
    }

    /// `m / s` for a scalar node `s`.
    pub fn div_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        self.binary(
            m,
            s,
            "div_scalar",
            |_, s| s.shape() == (1, 1),
            |m, s| {
                let s = s[0];
                m.map(|v| v / s)
            },
            Op::DivScalar,
        )
    }

    /// `a bᵀ` for column vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "outer",
            |a, b| a.ncols() == 1 && b.ncols() == 1,
            linalg::outer,
            Op::Outer,
        )
    }

    /// Frobenius inner product, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "dot",
            |a, b| a.shape() == b.shape(),
            |a, b| Mat::from_element(1, 1, linalg::dot(a, b)),
            Op::Dot,
        )
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let ia = self.own(a)?;
        let va = &self.nodes[ia].value;
        if va.nrows() != va.ncols() {
            return Err(Error::shape("trace", format!("{:?} is not square", va.shape())));
        }
        self.unary(a, |x| Mat::from_element(1, 1, linalg::trace(x)), Op::Trace)
    }

    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Mat::from_element(1, 1, linalg::sq_norm(x)), Op::SqNorm)
    }

    /// Sum of same-shaped nodes, added left to right.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let ids = items.iter().map(|&v| self.own(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::shape("sum", "no operands"));
        };
        let shape = self.nodes[first].value.shape();
        let mut acc = self.nodes[first].value.clone();
        for &i in &ids[1..] {
            let v = &self.nodes[i].value;
            if v.shape() != shape {
                return Err(Error::shape("sum", format!("{:?} and {:?}", shape, v.shape())));
            }
            acc += v;
        }
        let g = self.grad_of(&ids);
        self.push(acc, Op::Sum(ids), g)
    }

    /// Adjoints of every node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.own(root)?;
        let (rows, cols) = self.nodes[r].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        let mut adj: Vec<Option<Mat>> = vec![None; r + 1];
        adj[r] = Some(Mat::from_element(1, 1, 1.0));

        fn acc(adj: &mut [Option<Mat>], i: usize, g: Mat) {
            match &mut adj[i] {
                Some(a) => *a += g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=r).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let needs = |j: usize| nodes[j].needs_grad;
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    if needs(a) {
                        acc(&mut adj, a, g.clone());
                    }
                    if needs(b) {
                        acc(&mut adj, b, g.clone());
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        acc(&mut adj, a, g.clone());
                    }
                    if needs(b) {
                        acc(&mut adj, b, -&g);
                    }
                }
                &Op::Neg(a) => acc(&mut adj, a, -&g),
                &Op::MatMul(a, b) => {
                    if needs(a) {
                        acc(&mut adj, a, &g * val(b).transpose());
                    }
                    if needs(b) {
                        acc(&mut adj, b, val(a).transpose() * &g);
                    }
                }
                &Op::TMatVec(w, x) => {
                    if needs(w) {
                        acc(&mut adj, w, val(x) * g.transpose());
                    }
                    if needs(x) {
                        acc(&mut adj, x, val(w) * &g);
                    }
                }
                &Op::Transpose(a) => acc(&mut adj, a, g.transpose()),
                &Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |g, t| g * (1.0 - t * t));
                    acc(&mut adj, a, d);
                }
                &Op::Relu(a) => {
                    // subgradient 0 at exactly 0
                    let d = g.zip_map(val(a), |g, v| if v > 0.0 { g } else { 0.0 });
                    acc(&mut adj, a, d);
                }
                &Op::Cube(a) => {
                    let d = g.zip_map(val(a), |g, v| 3.0 * v * v * g);
                    acc(&mut adj, a, d);
                }
                &Op::Scale(a, c) => acc(&mut adj, a, &g * c),
                &Op::AddConst(a) => acc(&mut adj, a, g.clone()),
                &Op::MulScalar(s, m) => {
                    if needs(s) {
                        let ds = linalg::dot(&g, val(m));
                        acc(&mut adj, s, Mat::from_element(1, 1, ds));
                    }
                    if needs(m) {
                        acc(&mut adj, m, &g * val(s)[0]);
                    }
                }
                &Op::DivScalar(m, s) => {
                    let sv = val(s)[0];
                    if needs(s) {
                        let ds = -linalg::dot(&g, val(m)) / (sv * sv);
                        acc(&mut adj, s, Mat::from_element(1, 1, ds));
                    }
                    if needs(m) {
                        acc(&mut adj, m, &g / sv);
                    }
                }
                &Op::Outer(a, b) => {
                    if needs(a) {
                        acc(&mut adj, a, &g * val(b));
                    }
                    if needs(b) {
                        acc(&mut adj, b, g.transpose() * val(a));
                    }
                }
                &Op::Dot(a, b) => {
                    let s = g[0];
                    if needs(a) {
                        acc(&mut adj, a, val(b) * s);
                    }
                    if needs(b) {
                        acc(&mut adj, b, val(a) * s);
                    }
                }
                &Op::Trace(a) => {
                    let n = val(a).nrows();
                    acc(&mut adj, a, Mat::identity(n, n) * g[0]);
                }
                &Op::SqNorm(a) => acc(&mut adj, a, val(a) * (2.0 * g[0])),
                Op::Sum(ids) => {
                    for &j in ids {
                        if needs(j) {
                            acc(&mut adj, j, g.clone());
                        }
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            adj,
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.idx).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, or zeros of shape `like` when nothing reached it.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    /// Adjoint of `v`; panics if `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Mat {
        self.get(v).cloned().expect("variable is not connected to the root")
    }
}

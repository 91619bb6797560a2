//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node. Handles ([`Var`]) are
//! plain indices into the graph, so they are `Copy` and cheap to pass
//! around. Nodes are appended in evaluation order, which makes the node
//! list a topological order; [`Graph::backward`] walks it in reverse.
//!
//! Every operation validates shapes and rejects non-finite results, so a
//! NaN never survives silently: the op that produced it is named in the
//! returned [`AutodiffError`].
//!
//! ```
//! use klue::autodiff::Graph;
//! use klue::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), Some(6.0));
//! ```

mod gradcheck;

pub use gradcheck::{gradcheck, GradCheckReport, ParamCheck};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxRows(Var, f64),
    SqFrobenius(Var),
    NormalizeRows(Var, f64),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    TileRows(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A computation graph. Build a fresh one per evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

/// Output shape for an elementwise op with scalar broadcast.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar_like() && (!a.is_scalar_like() || a.rank() >= b.rank()) {
        Ok(a.shape().to_vec())
    } else if a.is_scalar_like() {
        Ok(b.shape().to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn broadcast_get(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar_like() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// Reduces an upstream gradient onto an operand that may have been broadcast.
fn reduce_to(operand: &Tensor, grad: Vec<f64>) -> Tensor {
    if operand.numel() == grad.len() {
        Tensor::new(operand.shape().to_vec(), grad).expect("gradient matches operand")
    } else {
        let total: f64 = grad.iter().sum();
        Tensor::new(operand.shape().to_vec(), vec![total]).expect("scalar-like operand")
    }
}

fn row_shape(input: &Tensor, cols: usize) -> Vec<usize> {
    match input.rank() {
        2 => vec![input.rows(), cols],
        _ => vec![cols],
    }
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn derived(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = self.needs(inputs);
        Ok(self.push(value, op, requires_grad))
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient, `None` if no backward pass reached the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(broadcast_get(ta, i), broadcast_get(tb, i)))
            .collect();
        let value = Tensor::new(shape, data)?;
        self.derived(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.derived(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `1 − a`, the fuzzy negation.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.unary("one_minus", a, |x| 1.0 - x, Op::Scale(a, -1.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, tb, false, false);
        self.derived("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = transpose_raw(t);
        self.derived("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log; the argument must be strictly positive. Use
    /// [`Graph::ln_clamped`] for probabilities.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "ln",
                detail: format!("argument {bad} is not positive"),
            });
        }
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    /// `ln(clamp(a, lo, hi))`.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let c = self.clamp(a, lo, hi)?;
        self.ln(c)
    }

    /// Elementwise power with a constant exponent. Negative bases are
    /// rejected unless the exponent is an integer.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        if exponent.fract() != 0.0 {
            if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
                return Err(AutodiffError::Domain {
                    op: "pow",
                    detail: format!("negative base {bad} with fractional exponent {exponent}"),
                });
            }
        }
        if exponent < 0.0 {
            if self.value(a).data().contains(&0.0) {
                return Err(AutodiffError::Domain {
                    op: "pow",
                    detail: format!("zero base with negative exponent {exponent}"),
                });
            }
        }
        self.unary("pow", a, |x| x.powf(exponent), Op::Pow(a, exponent))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(AutodiffError::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `max(a, 0)`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.derived("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(AutodiffError::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.derived("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums each row: `[r, c] → [r, 1]`, `[c] → [1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::new(row_shape(t, 1), data)?;
        self.derived("sum_rows", value, Op::SumRows(a), &[a])
    }

    /// Row-wise `softmax(temperature · a)`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row
                .iter()
                .map(|x| temperature * x)
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (temperature * x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.derived("softmax_rows", value, Op::SoftmaxRows(a, temperature), &[a])
    }

    /// `‖a‖²_F`, the sum of squares.
    pub fn sq_frobenius(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.derived("sq_frobenius", Tensor::scalar(s), Op::SqFrobenius(a), &[a])
    }

    /// Scales each row to unit L2 norm: `x / max(‖x‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            data.extend(row.iter().map(|x| x / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.derived("normalize_rows", value, Op::NormalizeRows(a, eps), &[a])
    }

    /// Selects columns (or vector elements) by index; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                extent: cols,
            });
        }
        let mut data = Vec::with_capacity(t.rows() * indices.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            data.extend(indices.iter().map(|&i| row[i]));
        }
        let value = Tensor::new(row_shape(t, indices.len()), data)?;
        self.derived("gather_cols", value, Op::GatherCols(a, indices.to_vec()), &[a])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Domain {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        };
        let first_t = self.value(*first);
        let rows = first_t.rows();
        let rank = first_t.rank().max(1);
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows || t.rank().max(1) != rank {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first_t.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let value = Tensor::new(shape, data)?;
        self.derived("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Repeats a vector (or single-row matrix) as `rows` identical rows.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "tile_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, t.cols()],
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        self.derived("tile_rows", value, Op::TileRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.derived("reshape", value, Op::Reshape(a), &[a])
    }

    /// Propagates gradients from a scalar root into every reachable node
    /// that requires them. Gradients accumulate across calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar_like() {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut pass: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pass[root.0] = Some(Tensor::ones(root_value.shape()));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = pass[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (parent, contribution) in self.local_grads(idx, &upstream) {
                if self.nodes[parent.0].requires_grad {
                    check_finite("backward", &contribution)?;
                    add_into(&mut pass[parent.0], contribution);
                }
            }
            add_into(&mut self.nodes[idx].grad, upstream);
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, reduce_to(ta, gd.to_vec())),
                    (*b, reduce_to(tb, gd.to_vec())),
                ]
            }
            Op::Sub(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, reduce_to(ta, gd.to_vec())),
                    (*b, reduce_to(tb, gd.iter().map(|x| -x).collect())),
                ]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().enumerate().map(|(i, g)| g * broadcast_get(tb, i)).collect();
                let gb = gd.iter().enumerate().map(|(i, g)| g * broadcast_get(ta, i)).collect();
                vec![(*a, reduce_to(ta, ga)), (*b, reduce_to(tb, gb))]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| c * x))],
            Op::Offset(a) | Op::Reshape(a) => {
                vec![(*a, shaped(self.value(*a), gd.to_vec()))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, matmul_raw(g, tb, false, true)),
                    (*b, matmul_raw(ta, g, true, false)),
                ]
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g))],
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, shaped(out, d))]
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![(*a, shaped(out, d))]
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                vec![(*a, shaped(out, d))]
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = gd.iter().zip(x.data()).map(|(g, x)| g / x).collect();
                vec![(*a, shaped(x, d))]
            }
            Op::Pow(a, e) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| {
                        let local = e * x.powf(e - 1.0);
                        // Subgradient 0 where the derivative is unbounded (x = 0, e < 1).
                        if local.is_finite() {
                            g * local
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, shaped(x, d))]
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                vec![(*a, shaped(x, d))]
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, shaped(x, d))]
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                vec![(*a, Tensor::full(x.shape(), gd[0]))]
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                vec![(*a, Tensor::full(x.shape(), gd[0] / x.numel() as f64))]
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let d = (0..x.numel()).map(|i| gd[i / c]).collect();
                vec![(*a, shaped(x, d))]
            }
            Op::SoftmaxRows(a, tau) => {
                let c = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(y.iter().zip(gr).map(|(y, g)| tau * y * (g - dot)));
                }
                vec![(*a, shaped(out, d))]
            }
            Op::SqFrobenius(a) => {
                let x = self.value(*a);
                vec![(*a, x.map(|v| 2.0 * v * gd[0]))]
            }
            Op::NormalizeRows(a, eps) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = Vec::with_capacity(x.numel());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let y = out.row(r);
                    let gr = &gd[r * c..(r + 1) * c];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        d.extend(y.iter().zip(gr).map(|(y, g)| (g - y * dot) / norm));
                    } else {
                        d.extend(gr.iter().map(|g| g / eps));
                    }
                }
                vec![(*a, shaped(x, d))]
            }
            Op::GatherCols(a, indices) => {
                let x = self.value(*a);
                let (c_in, c_out) = (x.cols(), indices.len());
                let mut d = vec![0.0; x.numel()];
                for r in 0..x.rows() {
                    for (j, &i) in indices.iter().enumerate() {
                        d[r * c_in + i] += gd[r * c_out + j];
                    }
                }
                vec![(*a, shaped(x, d))]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let t = self.value(*p);
                    let c = t.cols();
                    let mut d = Vec::with_capacity(t.numel());
                    for r in 0..t.rows() {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    grads.push((*p, shaped(t, d)));
                }
                grads
            }
            Op::TileRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = vec![0.0; c];
                for r in 0..out.rows() {
                    for (j, v) in d.iter_mut().enumerate() {
                        *v += gd[r * c + j];
                    }
                }
                vec![(*a, shaped(x, d))]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, data).expect("transpose shape")
}

/// `op(a) · op(b)` where `op` optionally transposes.
fn matmul_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = if ta { ad[p * ac + i] } else { ad[i * ac + p] };
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            if tb {
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * bd[j * bc + p];
                }
            } else {
                for (o, bv) in row.iter_mut().zip(&bd[p * bc..(p + 1) * bc]) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), Some(0.5));
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn softmax_with_zero_temperature_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, 0.2, 7.5, 1.0]));
        let s = g.softmax_rows(x, 0.0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn linearity_of_elementwise_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.param(t(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[1.0; 6]);
        assert!(g.grad(a).is_none());
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // f(x) = x² + x³, f'(x) = 2x + 3x²
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let sq = g.pow(x, 2.0).unwrap();
        let cube = g.pow(x, 3.0).unwrap();
        let both = g.concat_cols(&[sq, cube]).unwrap();
        let s = g.sum(both).unwrap();
        g.backward(s).unwrap();
        let expected = 2.0 * 1.5 + 3.0 * 1.5 * 1.5;
        assert!((g.grad(x).unwrap().item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(6.0));
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(3.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        match g.add(a, b) {
            Err(AutodiffError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(
            g.matmul(a, c),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.5, 0.0]));
        assert!(matches!(g.ln(x), Err(AutodiffError::Domain { op: "ln", .. })));
        let n = g.constant(Tensor::vector(vec![-0.5]));
        assert!(matches!(
            g.pow(n, 0.5),
            Err(AutodiffError::Domain { op: "pow", .. })
        ));
        assert!(g.pow(n, 2.0).is_ok());
        let ok = g.ln_clamped(x, 1e-7, 1.0 - 1e-7).unwrap();
        assert!((g.value(ok).data()[1] - (1e-7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert_eq!(g.exp(x), Err(AutodiffError::NonFinite { op: "exp" }));
    }

    #[test]
    fn matmul_and_transpose() {
        let mut g = Graph::new();
        let a = g.param(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(3, 1, &[1.0, 0.0, -1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[-2.0, -2.0]);
        let at = g.transpose(a).unwrap();
        assert_eq!(g.value(at).shape(), &[3, 2]);
        assert_eq!(g.value(at).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 0.0, -1.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn gather_concat_tile_shapes() {
        let mut g = Graph::new();
        let x = g.param(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather_cols(x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[3.0, 1.0, 3.0, 6.0, 4.0, 6.0]);
        let s = g.sum(picked).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 2.0, 1.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![1.0, 2.0]));
        let tiled = g.tile_rows(v, 3).unwrap();
        assert_eq!(g.value(tiled).shape(), &[3, 2]);
        let s = g.sum(tiled).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn normalize_rows_guards_zero_rows() {
        let mut g = Graph::new();
        let x = g.param(t(2, 2, &[3.0, 4.0, 0.0, 0.0]));
        let n = g.normalize_rows(x, 1e-12).unwrap();
        assert_eq!(g.value(n).data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(2.0));
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = g.mul(s, x).unwrap();
        assert_eq!(g.value(p).shape(), &[3]);
        let total = g.sum(p).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(s).unwrap().item(), Some(6.0));
    }

    #[test]
    fn pow_at_zero_has_finite_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let r = g.pow(x, 0.5).unwrap();
        g.backward(r).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), Some(0.0));
    }
}

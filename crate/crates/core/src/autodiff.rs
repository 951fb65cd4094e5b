//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node whose parents already live in the arena, so insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Graphs are cheap to build and are rebuilt for every training step.
//!
//! ```
//! use l0sparse::autodiff::Graph;
//! use l0sparse::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::tensor::{gemm, Tensor};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    /// Both operands share one shape.
    Same,
    /// Right operand is a row vector repeated over the rows of the left one.
    RowsOfLhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    HardSigmoid(Var),
    Relu(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    SquaredError(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Arena of nodes recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
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

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn hard_sigmoid(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
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

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; `None` if the node never received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let row_like = match sb {
            [n] => Some(*n),
            [1, n] => Some(*n),
            _ => None,
        };
        match (sa, row_like) {
            ([_, cols], Some(n)) if *cols == n => Ok(Broadcast::RowsOfLhs),
            _ => Err(self.shape_err(op, a, b)),
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match kind {
            Broadcast::Same => ta.zip_map(tb, f),
            Broadcast::RowsOfLhs => {
                let n = tb.len();
                let data = ta
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % n]))
                    .collect();
                Tensor::new(ta.shape().to_vec(), data).expect("same shape as lhs")
            }
        };
        self.push(op_name, value, make(a, b, kind), &[a, b])
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
        );
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; `b` may be a row vector broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::Shape {
                op: "mean",
                lhs: t.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Row sums of a matrix: `[m x n] -> [m]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(AutodiffError::Shape {
                op: "sum_cols",
                lhs: t.shape().to_vec(),
                rhs: Vec::new(),
            });
        }
        let v = Tensor::vector((0..t.rows()).map(|i| t.row(i).iter().sum()).collect());
        self.push("sum_cols", v, Op::SumCols(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    /// `log(sigmoid(a))` without underflow for very negative inputs.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(log_sigmoid);
        self.push("log_sigmoid", v, Op::LogSigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    /// `min(1, max(0, a))`; subgradient 1 strictly inside (0, 1), 0 elsewhere.
    pub fn hard_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(hard_sigmoid);
        self.push("hard_sigmoid", v, Op::HardSigmoid(a), &[a])
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Mean over rows of `-log softmax(logits)[label]`, computed with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, classes) = match t.shape() {
            [r, c] if *r == labels.len() => (*r, *c),
            s => {
                return Err(AutodiffError::Shape {
                    op: "softmax_cross_entropy",
                    lhs: s.to_vec(),
                    rhs: vec![labels.len()],
                })
            }
        };
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let value = Tensor::scalar(total / rows.max(1) as f64);
        let probs = Tensor::matrix(rows, classes, probs);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.is_empty() {
            return Err(self.shape_err("squared_error", pred, target));
        }
        let sse: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = Tensor::scalar(sse / p.len() as f64);
        self.push("squared_error", v, Op::SquaredError(pred, target), &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`, overwriting all gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &upstream);
            self.nodes[i].grad = Some(upstream);
            for (parent, g) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each parent that needs a gradient.
    fn vjp(&self, i: usize, up: &Tensor) -> Vec<(Var, Tensor)> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let mut res = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(a) {
                    // dA = dC * B^T
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, up.data(), (n as isize, 1), tb.data(), (1, n as isize), &mut d);
                    res.push((*a, Tensor::matrix(m, k, d)));
                }
                if needs(b) {
                    // dB = A^T * dC
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), (1, k as isize), up.data(), (n as isize, 1), &mut d);
                    res.push((*b, Tensor::matrix(k, n, d)));
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    res.push((*a, up.clone()));
                }
                if needs(b) {
                    let g = reduce_to(up, val(*b), *kind).map(|x| sign * x);
                    res.push((*b, g));
                }
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(a) {
                    let g = match kind {
                        Broadcast::Same => up.zip_map(tb, |u, y| u * y),
                        Broadcast::RowsOfLhs => {
                            let n = tb.len();
                            let data = up
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(j, &u)| u * tb.data()[j % n])
                                .collect();
                            Tensor::new(up.shape().to_vec(), data).expect("shape of lhs")
                        }
                    };
                    res.push((*a, g));
                }
                if needs(b) {
                    let prod = up.zip_map(ta, |u, x| u * x);
                    res.push((*b, reduce_to(&prod, tb, *kind)));
                }
            }
            Op::Neg(a) => res.push((*a, up.map(|u| -u))),
            Op::Scale(a, c) => res.push((*a, up.map(|u| c * u))),
            Op::AddScalar(a) => res.push((*a, up.clone())),
            Op::Sum(a) => {
                let u = up.item();
                res.push((*a, val(*a).map(|_| u)));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let u = up.item() / t.len() as f64;
                res.push((*a, t.map(|_| u)));
            }
            Op::SumCols(a) => {
                let t = val(*a);
                let c = t.cols();
                let data = (0..t.len()).map(|j| up.data()[j / c]).collect();
                res.push((*a, Tensor::new(t.shape().to_vec(), data).expect("shape of input")));
            }
            Op::Sigmoid(a) => res.push((*a, up.zip_map(out, |u, s| u * s * (1.0 - s)))),
            Op::LogSigmoid(a) => res.push((*a, up.zip_map(val(*a), |u, x| u * sigmoid(-x)))),
            Op::Log(a) => res.push((*a, up.zip_map(val(*a), |u, x| u / x))),
            Op::Exp(a) => res.push((*a, up.zip_map(out, |u, e| u * e))),
            Op::HardSigmoid(a) => res.push((
                *a,
                up.zip_map(val(*a), |u, x| if x > 0.0 && x < 1.0 { u } else { 0.0 }),
            )),
            Op::Relu(a) => res.push((*a, up.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 }))),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let rows = labels.len().max(1) as f64;
                let c = probs.cols();
                let u = up.item() / rows;
                let mut g = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    g.data_mut()[r * c + label] -= 1.0;
                }
                res.push((*logits, g.map(|x| x * u)));
            }
            Op::SquaredError(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let u = 2.0 * up.item() / tp.len() as f64;
                let d = tp.zip_map(tt, |a, b| u * (a - b));
                if needs(t) {
                    res.push((*t, d.map(|x| -x)));
                }
                res.push((*p, d));
            }
        }
        res
    }
}

/// Sums a broadcast gradient back to the shape of the right operand.
fn reduce_to(g: &Tensor, target: &Tensor, kind: Broadcast) -> Tensor {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::RowsOfLhs => {
            let n = target.len();
            let mut acc = vec![0.0; n];
            for (j, &x) in g.data().iter().enumerate() {
                acc[j % n] += x;
            }
            Tensor::new(target.shape().to_vec(), acc).expect("shape of rhs")
        }
    }
}

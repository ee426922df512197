//! Reverse-mode tape over dense tensors.
//!
//! Every vector-Jacobian product is itself recorded as tape operations, so a
//! gradient obtained from [`Tape::backward`] can be differentiated again. This
//! is what Hessian-vector products are built on.
//!
//! Node ids are assigned in creation order, which is a topological order: a
//! node's parents always have smaller ids.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{matmul_into, transpose, Tensor};
use crate::error::{Error, Result};

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Vec<f64>>),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    BroadcastRows(usize),
    SumRows(usize),
    BroadcastCols(usize),
    SumCols(usize),
    Sum(usize),
    Expand(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    LogSumExpRows(usize),
    GatherCols(usize, Rc<Vec<usize>>),
    ScatterCols(usize, Rc<Vec<usize>>),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    failure: Cell<Option<&'static str>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let needs_grad = t.requires_grad();
        self.push_node(Op::Leaf, t, needs_grad, "leaf")
    }

    /// Differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_grad(true))
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_grad(false))
    }

    /// First recorded numeric failure, if any.
    pub fn check(&self) -> Result<()> {
        match self.failure.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push_node(&self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Var<'_> {
        if self.failure.get().is_none() && !value.is_finite() {
            self.failure.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, value: Tensor, parents: &[usize], name: &'static str) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.push_node(op, value, needs_grad, name)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned gradients live on this tape and are differentiable
    /// whenever they depend on a differentiable leaf.
    pub fn backward<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.check()?;
        let out_val = output.value();
        if out_val.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; output.id + 1];
        grads[output.id] = Some(self.constant(Tensor::full(out_val.shape(), 1.0)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id] else { continue };
            if !self.needs_grad(id) {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let this = Var { tape: self, id };
            let mut acc = |pid: usize, contrib: &dyn Fn() -> Var<'t>| {
                if !self.needs_grad(pid) {
                    return;
                }
                let c = contrib();
                grads[pid] = Some(match grads[pid] {
                    Some(prev) => prev + c,
                    None => c,
                });
            };
            let v = |pid: usize| Var { tape: self, id: pid };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, &|| g);
                    acc(b, &|| g);
                }
                Op::Sub(a, b) => {
                    acc(a, &|| g);
                    acc(b, &|| -g);
                }
                Op::Mul(a, b) => {
                    acc(a, &|| g * v(b));
                    acc(b, &|| g * v(a));
                }
                Op::MulConst(a, c) => acc(a, &|| g.mul_const_rc(Rc::clone(&c))),
                Op::Scale(a, k) => acc(a, &|| g.scale(k)),
                Op::AddScalar(a) => acc(a, &|| g),
                Op::MatMul(a, b) => {
                    acc(a, &|| g.matmul(v(b).t()));
                    acc(b, &|| v(a).t().matmul(g));
                }
                Op::Transpose(a) => acc(a, &|| g.t()),
                Op::BroadcastRows(a) => acc(a, &|| g.sum_rows()),
                Op::SumRows(a) => {
                    let m = v(a).value().rows();
                    acc(a, &|| g.broadcast_rows(m))
                }
                Op::BroadcastCols(a) => acc(a, &|| g.sum_cols()),
                Op::SumCols(a) => {
                    let n = v(a).value().cols();
                    acc(a, &|| g.broadcast_cols(n))
                }
                Op::Sum(a) => {
                    let shape = v(a).value().shape().to_vec();
                    acc(a, &|| g.expand(&shape))
                }
                Op::Expand(a) => acc(a, &|| g.sum()),
                Op::Relu(a) => {
                    let mask: Vec<f64> = v(a)
                        .value()
                        .data()
                        .iter()
                        .map(|&z| if z > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    acc(a, &|| g.mul_const(mask.clone()))
                }
                Op::Exp(a) => acc(a, &|| g * this),
                Op::Log(a) => acc(a, &|| g * v(a).recip()),
                Op::Recip(a) => acc(a, &|| -(g * (this * this))),
                Op::Sigmoid(a) => acc(a, &|| g * (this * this.scale(-1.0).add_scalar(1.0))),
                Op::Softplus(a) => acc(a, &|| g * v(a).sigmoid()),
                Op::Abs(a) => {
                    let sign: Vec<f64> = v(a).value().data().iter().map(|&z| sign0(z)).collect();
                    acc(a, &|| g.mul_const(sign.clone()))
                }
                Op::LogSumExpRows(a) => {
                    let n = v(a).value().cols();
                    acc(a, &|| {
                        let soft = (v(a) - this.broadcast_cols(n)).exp();
                        g.broadcast_cols(n) * soft
                    })
                }
                Op::GatherCols(a, idx) => {
                    let n = v(a).value().cols();
                    acc(a, &|| g.scatter_cols_rc(Rc::clone(&idx), n))
                }
                Op::ScatterCols(a, idx) => acc(a, &|| g.gather_cols_rc(Rc::clone(&idx))),
                Op::Reshape(a) => {
                    let shape = v(a).value().shape().to_vec();
                    acc(a, &|| g.reshape(&shape))
                }
            }
        }
        self.check()?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }
}

fn sign0(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn unary(self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&z| f(z)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.push(op, out, &[self.id], name)
    }

    fn binary(self, other: Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{name}: operand shapes differ");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        self.tape.push(op, out, &[self.id, other.id], name)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), "scale", |z| k * z)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), "add_scalar", |z| z + k)
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(self, c: Vec<f64>) -> Var<'t> {
        self.mul_const_rc(Rc::new(c))
    }

    fn mul_const_rc(self, c: Rc<Vec<f64>>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.numel(), c.len(), "mul_const: length mismatch");
        let data = x.data().iter().zip(c.iter()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.push(Op::MulConst(self.id, c), out, &[self.id], "mul_const")
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul needs matrices");
        let (m, k) = (a.rows(), a.cols());
        let (k2, n) = (b.rows(), b.cols());
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), m, k, n, &mut out);
        let out = Tensor::from_parts(vec![m, n], out);
        self.tape.push(Op::MatMul(self.id, other.id), out, &[self.id, other.id], "matmul")
    }

    pub fn t(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "transpose needs a matrix");
        let (m, n) = (a.rows(), a.cols());
        let out = Tensor::from_parts(vec![n, m], transpose(a.data(), m, n));
        self.tape.push(Op::Transpose(self.id), out, &[self.id], "transpose")
    }

    /// Repeat a length-`n` vector as `m` rows of an `m×n` matrix.
    pub fn broadcast_rows(self, m: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 1, "broadcast_rows needs a vector");
        let n = a.numel();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(a.data());
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push(Op::BroadcastRows(self.id), out, &[self.id], "broadcast_rows")
    }

    /// Column sums of an `m×n` matrix, as a length-`n` vector.
    pub fn sum_rows(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "sum_rows needs a matrix");
        let (m, n) = (a.rows(), a.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, &x) in data.iter_mut().zip(&a.data()[i * n..(i + 1) * n]) {
                *d += x;
            }
        }
        let out = Tensor::from_parts(vec![n], data);
        self.tape.push(Op::SumRows(self.id), out, &[self.id], "sum_rows")
    }

    /// Repeat a length-`m` vector as `n` columns of an `m×n` matrix.
    pub fn broadcast_cols(self, n: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 1, "broadcast_cols needs a vector");
        let m = a.numel();
        let mut data = Vec::with_capacity(m * n);
        for &x in a.data() {
            data.extend(std::iter::repeat(x).take(n));
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push(Op::BroadcastCols(self.id), out, &[self.id], "broadcast_cols")
    }

    /// Row sums of an `m×n` matrix, as a length-`m` vector.
    pub fn sum_cols(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "sum_cols needs a matrix");
        let n = a.cols();
        let data = a.data().chunks(n).map(|r| r.iter().sum()).collect::<Vec<f64>>();
        let out = Tensor::from_parts(vec![a.rows()], data);
        self.tape.push(Op::SumCols(self.id), out, &[self.id], "sum_cols")
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s), &[self.id], "sum")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Fill `shape` with the value of a single-element node.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let s = self.item();
        self.tape
            .push(Op::Expand(self.id), Tensor::full(shape, s), &[self.id], "expand")
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), "relu", |z| z.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), "log", f64::ln)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), "recip", |z| 1.0 / z)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), "sigmoid", stable_sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), "softplus", stable_softplus)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), "abs", f64::abs)
    }

    /// Row-wise log-sum-exp of an `m×n` matrix.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "logsumexp_rows needs a matrix");
        let n = a.cols();
        let data = a.data().chunks(n).map(logsumexp).collect::<Vec<f64>>();
        let out = Tensor::from_parts(vec![a.rows()], data);
        self.tape
            .push(Op::LogSumExpRows(self.id), out, &[self.id], "logsumexp_rows")
    }

    /// Row-wise log-softmax of an `m×n` matrix.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let n = self.value().cols();
        self - self.logsumexp_rows().broadcast_cols(n)
    }

    /// `out[i] = self[i, idx[i]]`.
    pub fn gather_cols(self, idx: Vec<usize>) -> Var<'t> {
        self.gather_cols_rc(Rc::new(idx))
    }

    fn gather_cols_rc(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "gather_cols needs a matrix");
        assert_eq!(a.rows(), idx.len(), "gather_cols: one index per row");
        let n = a.cols();
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "gather_cols: column {j} out of range");
                a.data()[i * n + j]
            })
            .collect();
        let out = Tensor::from_parts(vec![idx.len()], data);
        self.tape.push(Op::GatherCols(self.id, idx), out, &[self.id], "gather_cols")
    }

    /// `m×n` matrix with `self[i]` at column `idx[i]` of row `i`, zeros elsewhere.
    pub fn scatter_cols(self, idx: Vec<usize>, n: usize) -> Var<'t> {
        self.scatter_cols_rc(Rc::new(idx), n)
    }

    fn scatter_cols_rc(self, idx: Rc<Vec<usize>>, n: usize) -> Var<'t> {
        let a = self.value();
        let m = a.numel();
        assert_eq!(m, idx.len(), "scatter_cols: one index per element");
        let mut data = vec![0.0; m * n];
        for (i, (&j, &x)) in idx.iter().zip(a.data()).enumerate() {
            assert!(j < n, "scatter_cols: column {j} out of range");
            data[i * n + j] = x;
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.tape.push(Op::ScatterCols(self.id, idx), out, &[self.id], "scatter_cols")
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            a.numel(),
            "reshape: {:?} -> {shape:?}",
            a.shape()
        );
        let out = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        self.tape.push(Op::Reshape(self.id), out, &[self.id], "reshape")
    }

    /// Inner product with a constant array, as a scalar node.
    pub fn dot_const(self, c: &[f64]) -> Var<'t> {
        self.mul_const(c.to_vec()).sum()
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.id, rhs.id), "add", |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), "sub", |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), "mul", |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

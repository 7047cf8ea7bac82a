//! Reverse-mode differentiation over a closed set of dense-matrix
//! primitives.
//!
//! The engine is a classic tape: every primitive appends one node holding
//! its forward value and the indices of its inputs, and `backward` walks the
//! tape once in reverse, accumulating adjoints. The primitive set is closed
//! on purpose — matmul, elementwise arithmetic, a few pointwise
//! nonlinearities, row concatenation and row gathering — which is enough to
//! express every loss in this crate while keeping each gradient rule small
//! enough to audit by eye.
//!
//! Everything is double precision; the gradient-check harness leans on
//! 1e-6-class agreement with central differences, which single precision
//! cannot deliver.

mod checkpoint;
mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;
pub use params::{AdamWConfig, ParamId, ParamSet};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use thiserror::Error;

use crate::matrix::{Matrix, SparseMatrix};

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} domain violation: encountered {value}")]
    DomainViolation { op: &'static str, value: f64 },
    #[error("gather index {index} out of bounds for {rows} rows")]
    GatherOutOfBounds { index: usize, rows: usize },
    #[error("backward requires a scalar loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("backward already ran on this tape")]
    TapeSpent,
    #[error("parameter gradient missing for {0}")]
    MissingGrad(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    SpMM(Rc<SparseMatrix>, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Softplus(usize),
    Square(usize),
    ConcatRows(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// Records a single forward pass. One tape, one backward; build a fresh
/// tape per optimization step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    fn push(&self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&self, value: Matrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable leaf; `backward` populates its gradient.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Copy of the forward value of `v`.
    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.scalar_value()
    }

    /// Gradient of the loss w.r.t. `v`, if `backward` has produced one.
    pub fn grad(&self, v: Var) -> Option<Matrix> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MatMul(a.0, b.0)))
    }

    /// Sparse-constant times dense: the adjacency never carries gradient.
    pub fn spmm(&self, a: &Rc<SparseMatrix>, b: Var) -> Result<Var, TapeError> {
        let sb = self.shape(b);
        if a.shape().1 != sb.0 {
            return Err(TapeError::ShapeMismatch {
                op: "spmm",
                lhs: a.shape(),
                rhs: sb,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            a.matmul_dense(&nodes[b.0].value)
        };
        let rg = self.requires(b);
        Ok(self.push(value, rg, Op::SpMM(Rc::clone(a), b.0)))
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(&Matrix, &Matrix) -> Matrix,
        op: Op,
    ) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op: op_name,
                lhs: sa,
                rhs: sb,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("add", a, b, Matrix::add, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("sub", a, b, Matrix::sub, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("hadamard", a, b, Matrix::hadamard, Op::Hadamard(a.0, b.0))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.scale(c);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a.0, c))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes.borrow()[a.0].value.sum());
        let rg = self.requires(a);
        self.push(value, rg, Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes.borrow()[a.0].value.mean());
        let rg = self.requires(a);
        self.push(value, rg, Op::Mean(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(stable_sigmoid);
        let rg = self.requires(a);
        self.push(value, rg, Op::Sigmoid(a.0))
    }

    pub fn log(&self, a: Var) -> Result<Var, TapeError> {
        {
            let nodes = self.nodes.borrow();
            if let Some(&bad) = nodes[a.0].value.as_slice().iter().find(|&&x| x <= 0.0) {
                return Err(TapeError::DomainViolation {
                    op: "log",
                    value: bad,
                });
            }
        }
        let value = self.nodes.borrow()[a.0].value.map(f64::ln);
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Log(a.0)))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::exp);
        let rg = self.requires(a);
        self.push(value, rg, Op::Exp(a.0))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(stable_softplus);
        let rg = self.requires(a);
        self.push(value, rg, Op::Softplus(a.0))
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|x| x * x);
        let rg = self.requires(a);
        self.push(value, rg, Op::Square(a.0))
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(TapeError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.concat_rows(&nodes[b.0].value)
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::ConcatRows(a.0, b.0)))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var, TapeError> {
        let rows = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TapeError::GatherOutOfBounds { index: bad, rows });
        }
        let value = self.nodes.borrow()[a.0].value.gather_rows(idx);
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::GatherRows(a.0, Rc::new(idx.to_vec()))))
    }

    /// Populates gradients of every differentiable leaf reachable from
    /// `loss`. Consumes the tape's one backward pass; intermediate adjoints
    /// are released as soon as their node has been processed.
    pub fn backward(&self, loss: Var) -> Result<(), TapeError> {
        if self.spent.get() {
            return Err(TapeError::TapeSpent);
        }
        self.spent.set(true);
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut adjoints: Vec<Option<Matrix>> = vec![None; nodes.len()];
        adjoints[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                adjoints[i] = None;
                continue;
            }
            let grad = match &adjoints[i] {
                Some(_) => {
                    if matches!(nodes[i].op, Op::Leaf) {
                        continue; // leaf adjoints survive for write-back
                    }
                    adjoints[i].take().unwrap()
                }
                None => continue,
            };
            let mut push = |slot: usize, delta: Matrix| {
                if nodes[slot].requires_grad {
                    accumulate(&mut adjoints[slot], delta);
                }
            };
            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        push(*a, grad.matmul(&nodes[*b].value.transpose()));
                    }
                    if nodes[*b].requires_grad {
                        push(*b, nodes[*a].value.transpose().matmul(&grad));
                    }
                }
                Op::SpMM(sp, b) => {
                    if nodes[*b].requires_grad {
                        push(*b, sp.transpose().matmul_dense(&grad));
                    }
                }
                Op::Add(a, b) => {
                    push(*a, grad.clone());
                    push(*b, grad);
                }
                Op::Sub(a, b) => {
                    push(*a, grad.clone());
                    push(*b, grad.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    if nodes[*a].requires_grad {
                        push(*a, grad.hadamard(&nodes[*b].value));
                    }
                    if nodes[*b].requires_grad {
                        push(*b, grad.hadamard(&nodes[*a].value));
                    }
                }
                Op::Scale(a, c) => push(*a, grad.scale(*c)),
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    push(*a, Matrix::filled(r, c, grad.scalar_value()));
                }
                Op::Mean(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    push(*a, Matrix::filled(r, c, grad.scalar_value() / (r * c) as f64));
                }
                Op::Sigmoid(a) => {
                    let da = grad.zip_map(&nodes[i].value, |g, s| g * s * (1.0 - s));
                    push(*a, da);
                }
                Op::Log(a) => {
                    let da = grad.zip_map(&nodes[*a].value, |g, x| g / x);
                    push(*a, da);
                }
                Op::Exp(a) => push(*a, grad.hadamard(&nodes[i].value)),
                Op::Softplus(a) => {
                    let da = grad.zip_map(&nodes[*a].value, |g, x| g * stable_sigmoid(x));
                    push(*a, da);
                }
                Op::Square(a) => {
                    let da = grad.zip_map(&nodes[*a].value, |g, x| g * 2.0 * x);
                    push(*a, da);
                }
                Op::ConcatRows(a, b) => {
                    let ra = nodes[*a].value.rows();
                    push(*a, grad.slice_rows(0, ra));
                    push(*b, grad.slice_rows(ra, grad.rows()));
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut da = Matrix::zeros(r, c);
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        let d_row = da.row_mut(src_r);
                        for (d, &g) in d_row.iter_mut().zip(grad.row(out_r)) {
                            *d += g;
                        }
                    }
                    push(*a, da);
                }
            }
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (node, adj) in nodes.iter_mut().zip(adjoints.into_iter()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = adj;
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

/// Logistic function, computed without overflow for large |x|.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let t = Tape::new();
        let x = t.input(Matrix::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value_scalar(y), 0.5);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let t = Tape::new();
        let i3 = t.input(Matrix::identity(3));
        let m = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mv = t.input(m.clone());
        let out = t.matmul(i3, mv).unwrap();
        assert_eq!(t.value(out), m);
    }

    #[test]
    fn gather_rows_permutation() {
        let t = Tape::new();
        let m = t.input(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let g = t.gather_rows(m, &[1, 0]).unwrap();
        assert_eq!(t.value(g), Matrix::from_vec(2, 2, vec![3.0, 4.0, 1.0, 2.0]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]));
        let loss = t.sum(t.square(x));
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g, Matrix::from_vec(1, 3, vec![2.0, 4.0, 6.0]));
    }

    #[test]
    fn pairwise_logistic_gradient_at_tie() {
        // loss = -log sigmoid(a - b) = softplus(b - a); at a = b the
        // gradients are -0.5 and +0.5.
        let t = Tape::new();
        let a = t.leaf(Matrix::scalar(1.3));
        let b = t.leaf(Matrix::scalar(1.3));
        let delta = t.sub(b, a).unwrap();
        let loss = t.sum(t.softplus(delta));
        t.backward(loss).unwrap();
        assert!((t.grad(a).unwrap().scalar_value() + 0.5).abs() < 1e-12);
        assert!((t.grad(b).unwrap().scalar_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_rejected() {
        let t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let loss = t.square(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(TapeError::TapeSpent)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(TapeError::NonScalarLoss(_))));
    }

    #[test]
    fn log_domain_violation_reported() {
        let t = Tape::new();
        let x = t.input(Matrix::from_vec(1, 2, vec![1.0, -0.5]));
        assert!(matches!(
            t.log(x),
            Err(TapeError::DomainViolation { op: "log", .. })
        ));
    }

    #[test]
    fn shape_mismatch_reported() {
        let t = Tape::new();
        let a = t.input(Matrix::zeros(2, 3));
        let b = t.input(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add(a, t.input(Matrix::zeros(3, 2))).is_err());
    }

    #[test]
    fn repeated_gather_accumulates() {
        let t = Tape::new();
        let x = t.leaf(Matrix::from_vec(2, 1, vec![3.0, 4.0]));
        let g = t.gather_rows(x, &[0, 0, 1]).unwrap();
        let loss = t.sum(g);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), Matrix::from_vec(2, 1, vec![2.0, 1.0]));
    }
}

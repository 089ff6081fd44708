//! Reverse-mode differentiation over whole-matrix operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates the adjoint of every node, returning gradients for the
//! requested leaves.
//!
//! Each node stores its forward value, so the tape's memory grows with the
//! unrolled computation. A closed-loop rollout of horizon `T` records a few
//! dozen nodes per step.

use std::cell::RefCell;
use std::fmt;

use super::matrix::{cholesky_solve, Matrix};
use crate::error::{Error, Result};

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    Hadamard(usize, usize),
    DivElem(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    MaxScalar(usize, f64),
    Transpose(usize),
    VStack(Vec<usize>),
    SliceRows(usize, usize, usize),
    Reshape(usize, usize, usize),
    SolveSpd(usize, usize),
    Sum(usize),
    SumSquares(usize),
    Trace(usize),
    QuadForm(usize, usize),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Single-writer record of a computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.value())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn eval<'a>(op: &Op, value: impl Fn(usize) -> &'a Matrix) -> Result<Matrix> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => value(a).add(value(b))?,
        Op::Sub(a, b) => value(a).sub(value(b))?,
        Op::Neg(a) => value(a).map(|v| -v),
        Op::Scale(a, c) => value(a).scale(c),
        Op::AddScalar(a, c) => value(a).map(|v| v + c),
        Op::MatMul(a, b) => value(a).matmul(value(b))?,
        Op::Hadamard(a, b) => value(a).hadamard(value(b))?,
        Op::DivElem(a, b) => value(a).div_elem(value(b))?,
        Op::Sigmoid(a) => value(a).map(sigmoid),
        Op::Tanh(a) => value(a).map(f64::tanh),
        Op::Relu(a) => value(a).map(|v| v.max(0.0)),
        Op::Sqrt(a) => value(a).map(f64::sqrt),
        Op::MaxScalar(a, c) => value(a).map(|v| v.max(c)),
        Op::Transpose(a) => value(a).transpose(),
        Op::VStack(ref parts) => {
            let refs: Vec<&Matrix> = parts.iter().map(|&p| value(p)).collect();
            Matrix::vstack(&refs)?
        }
        Op::SliceRows(a, start, len) => value(a).slice_rows(start, len)?,
        Op::Reshape(a, r, c) => value(a).reshape(r, c)?,
        Op::SolveSpd(a, b) => value(a).solve_spd(value(b))?,
        Op::Sum(a) => Matrix::scalar(value(a).sum()),
        Op::SumSquares(a) => Matrix::scalar(value(a).norm_squared()),
        Op::Trace(a) => {
            let v = value(a);
            if !v.is_square() {
                return Err(Error::Dimension {
                    op: "trace",
                    lhs: v.shape(),
                    rhs: v.shape(),
                });
            }
            Matrix::scalar(v.trace())
        }
        Op::QuadForm(x, q) => Matrix::scalar(value(q).quad_form(value(x))?),
    })
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

    /// Record a leaf (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// Alias of [`Tape::leaf`] for values that are never differentiated.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    fn record(&self, op: Op) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            eval(&op, |i| &nodes[i].value)?
        };
        Ok(self.push(op, value))
    }

    pub fn value(&self, id: NodeId) -> Matrix {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// Recompute every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Matrix> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => eval(op, |i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradient of the scalar `loss` with respect to each of `leaves`.
    /// Leaves that do not influence `loss` get a zero gradient.
    pub fn backward(&self, loss: Var<'_>, leaves: &[Var<'_>]) -> Result<GradientMap> {
        if !std::ptr::eq(loss.tape, self) || leaves.iter().any(|l| !std::ptr::eq(l.tape, self)) {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id.0];
        if out.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                out.value.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.id.0 + 1];
        adj[loss.id.0] = Some(Matrix::scalar(1.0));

        fn acc(adj: &mut [Option<Matrix>], i: usize, g: Matrix) {
            match &mut adj[i] {
                Some(existing) => existing
                    .add_assign(&g)
                    .expect("adjoint shape matches node shape"),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.id.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a, g.clone());
                    acc(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, b, g.map(|v| -v));
                    acc(&mut adj, a, g);
                }
                Op::Neg(a) => acc(&mut adj, a, g.map(|v| -v)),
                Op::Scale(a, c) => acc(&mut adj, a, g.scale(c)),
                Op::AddScalar(a, _) => acc(&mut adj, a, g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(b).transpose())?;
                    let gb = val(a).transpose().matmul(&g)?;
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(val(b))?;
                    let gb = g.hadamard(val(a))?;
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::DivElem(a, b) => {
                    let ga = g.div_elem(val(b))?;
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.hadamard(&node.value)?.div_elem(val(b))?.map(|v| -v);
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|s| s * (1.0 - s));
                    acc(&mut adj, a, g.hadamard(&d)?);
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|t| 1.0 - t * t);
                    acc(&mut adj, a, g.hadamard(&d)?);
                }
                Op::Relu(a) => {
                    let d = val(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut adj, a, g.hadamard(&d)?);
                }
                Op::Sqrt(a) => {
                    let d = node.value.map(|s| 0.5 / s);
                    acc(&mut adj, a, g.hadamard(&d)?);
                }
                Op::MaxScalar(a, c) => {
                    let d = val(a).map(|v| if v > c { 1.0 } else { 0.0 });
                    acc(&mut adj, a, g.hadamard(&d)?);
                }
                Op::Transpose(a) => acc(&mut adj, a, g.transpose()),
                Op::VStack(ref parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = val(p).rows();
                        acc(&mut adj, p, g.slice_rows(offset, r)?);
                        offset += r;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let src = val(a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    full.as_mut_slice()[start * c..(start + len) * c].copy_from_slice(g.as_slice());
                    acc(&mut adj, a, full);
                }
                Op::Reshape(a, _, _) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, a, g.reshape(r, c)?);
                }
                Op::SolveSpd(a, b) => {
                    // X = A^{-1} B with A read through its lower triangle.
                    let l = val(a).cholesky()?;
                    let gb = cholesky_solve(&l, &g);
                    let full = gb.matmul(&node.value.transpose())?.map(|v| -v);
                    let n = full.rows();
                    let mut ga = Matrix::zeros(n, n);
                    for r in 0..n {
                        ga[(r, r)] = full[(r, r)];
                        for c in 0..r {
                            ga[(r, c)] = full[(r, c)] + full[(c, r)];
                        }
                    }
                    acc(&mut adj, a, ga);
                    acc(&mut adj, b, gb);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, a, Matrix::filled(r, c, g.item()));
                }
                Op::SumSquares(a) => acc(&mut adj, a, val(a).scale(2.0 * g.item())),
                Op::Trace(a) => {
                    let n = val(a).rows();
                    acc(&mut adj, a, Matrix::identity(n).scale(g.item()));
                }
                Op::QuadForm(x, q) => {
                    let xv = val(x);
                    let qv = val(q);
                    let s = g.item();
                    let gx = qv.add(&qv.transpose())?.matmul(xv)?.scale(s);
                    let gq = xv.matmul(&xv.transpose())?.scale(s);
                    acc(&mut adj, x, gx);
                    acc(&mut adj, q, gq);
                }
            }
        }

        let mut grads = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            if grads.iter().any(|(id, _)| *id == leaf.id) {
                continue;
            }
            let g = adj
                .get(leaf.id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| {
                    let (r, c) = nodes[leaf.id.0].value.shape();
                    Matrix::zeros(r, c)
                });
            grads.push((leaf.id, g));
        }
        Ok(GradientMap { grads })
    }
}

/// Gradients keyed by leaf.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<(NodeId, Matrix)>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Matrix> {
        self.get_id(leaf.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.grads.iter().map(|(i, g)| (*i, g))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id.0].value.shape()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variables live on different tapes".into()))
        }
    }

    fn binary(&self, other: Var<'t>, op: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.record(op(self.id.0, other.id.0))
    }

    fn unary(&self, op: Op) -> Var<'t> {
        self.tape.record(op).expect("unary op preserves shape")
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul)
    }

    pub fn hadamard(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Hadamard)
    }

    pub fn div_elem(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::DivElem)
    }

    /// `self^{-1} rhs` for symmetric positive definite `self`.
    pub fn solve_spd(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::SolveSpd)
    }

    /// `x^T Q x` where `self` is the column vector `x`.
    pub fn quad_form(&self, weight: Var<'t>) -> Result<Var<'t>> {
        self.binary(weight, Op::QuadForm)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id.0))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id.0, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id.0, c))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id.0))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id.0))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id.0))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id.0))
    }

    pub fn max_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::MaxScalar(self.id.0, c))
    }

    pub fn transpose(&self) -> Var<'t> {
        self.unary(Op::Transpose(self.id.0))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id.0))
    }

    pub fn sum_squares(&self) -> Var<'t> {
        self.unary(Op::SumSquares(self.id.0))
    }

    pub fn trace(&self) -> Result<Var<'t>> {
        self.tape.record(Op::Trace(self.id.0))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(Op::SliceRows(self.id.0, start, len))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.record(Op::Reshape(self.id.0, rows, cols))
    }

    pub fn vstack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("vstack of nothing".into()))?;
        for p in parts {
            first.same_tape(p)?;
        }
        first
            .tape
            .record(Op::VStack(parts.iter().map(|p| p.id.0).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_gradient_is_identity() {
        let tape = Tape::new();
        let theta = tape.leaf(Matrix::identity(2));
        let loss = theta.trace().unwrap();
        let g = tape.backward(loss, &[theta]).unwrap();
        assert_eq!(g.get(theta).unwrap(), &Matrix::identity(2));
    }

    #[test]
    fn squared_norm_gradient() {
        let tape = Tape::new();
        let theta = tape.leaf(Matrix::column(&[1.0, -2.0]));
        let loss = theta.sum_squares();
        let g = tape.backward(loss, &[theta]).unwrap();
        assert_eq!(g.get(theta).unwrap(), &Matrix::column(&[2.0, -4.0]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::column(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(3.0));
        let b = tape.leaf(Matrix::zeros(2, 3));
        let loss = a.scale(2.0);
        let g = tape.backward(loss, &[a, b]).unwrap();
        assert_eq!(g.get(a).unwrap(), &Matrix::scalar(2.0));
        assert_eq!(g.get(b).unwrap(), &Matrix::zeros(2, 3));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = x.hadamard(x).unwrap().add(x).unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn matmul_shape_error() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        let b = tape.leaf(Matrix::zeros(2, 3));
        assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_tape_use_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Matrix::scalar(1.0));
        let b = t2.leaf(Matrix::scalar(1.0));
        assert!(a.add(b).is_err());
        assert!(t1.backward(a, &[b]).is_err());
    }
}

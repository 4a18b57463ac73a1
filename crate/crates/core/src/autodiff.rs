//! Reverse-mode differentiation over a recorded tape of dense 2-D ops.
//!
//! The primitive set is deliberately closed: matrix product, addition (with
//! a `1 x n` row broadcast), Hadamard product, `tanh`, `sigmoid`, `softplus`,
//! concatenation and slicing along either axis, scalar multiplication, and
//! sum of squares. Everything else in the crate composes from these.
//!
//! Every op validates shapes and rejects non-finite results at the point they
//! are produced, so a NaN never reaches the optimizer silently.

use crate::tensor::{gemm, Tensor2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("loss node has shape {0:?}, expected 1x1")]
    NonScalarLoss((usize, usize)),
    #[error("slice [{start}, {end}) out of bounds for extent {extent}")]
    SliceOutOfBounds {
        start: usize,
        end: usize,
        extent: usize,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Concat(Vec<Var>, Axis),
    Slice {
        src: Var,
        axis: Axis,
        start: usize,
        len: usize,
    },
    Scale(Var, f64),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Single-threaded record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled with the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor2 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }
}

fn check(op: &'static str, t: Tensor2) -> Result<Tensor2, AutodiffError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(AutodiffError::NonFiniteValue { op })
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor2) -> Result<Var, AutodiffError> {
        let value = check("leaf", value)?;
        Ok(self.push(value, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        let out = check("matmul", out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may be a `1 x n` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.clone();
        if va.shape() == vb.shape() {
            out.add_assign(vb);
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            out.add_row_assign(vb.data());
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = check("add", out)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Hadamard product of equally shaped operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let mut out = va.clone();
        for (o, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= y;
        }
        let out = check("mul", out)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = check("tanh", self.value(a).map(f64::tanh))?;
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = check("sigmoid", self.value(a).map(sigmoid))?;
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = check("softplus", self.value(a).map(softplus))?;
        Ok(self.push(out, Op::Softplus(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, AutodiffError> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.value(parts[0]).shape();
        let out = match axis {
            Axis::Cols => {
                let rows = first.0;
                let mut cols = 0;
                for &p in parts {
                    let s = self.value(p).shape();
                    if s.0 != rows {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            left: first,
                            right: s,
                        });
                    }
                    cols += s.1;
                }
                let mut out = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let dst = out.row_mut(r);
                    let mut off = 0;
                    for &p in parts {
                        let src = self.nodes[p.0].value.row(r);
                        dst[off..off + src.len()].copy_from_slice(src);
                        off += src.len();
                    }
                }
                out
            }
            Axis::Rows => {
                let cols = first.1;
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols {
                        return Err(AutodiffError::ShapeMismatch {
                            op: "concat",
                            left: first,
                            right: v.shape(),
                        });
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor2::from_vec(rows, cols, data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(
        &mut self,
        src: Var,
        axis: Axis,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let v = self.value(src);
        let extent = match axis {
            Axis::Rows => v.rows(),
            Axis::Cols => v.cols(),
        };
        if start + len > extent {
            return Err(AutodiffError::SliceOutOfBounds {
                start,
                end: start + len,
                extent,
            });
        }
        let out = match axis {
            Axis::Rows => v.slice_rows(start, len),
            Axis::Cols => Tensor2::from_fn(v.rows(), len, |r, c| v.get(r, start + c)),
        };
        Ok(self.push(
            out,
            Op::Slice {
                src,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        let out = check("scale", self.value(a).map(|v| v * c))?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).sum_squares();
        let out = check("sum_squares", Tensor2::filled(1, 1, s))?;
        Ok(self.push(out, Op::SumSquares(a)))
    }

    /// `a - b` composed as `a + (-1) * b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Propagates d(loss)/d(node) for every node. Does not mutate the tape, so
    /// repeated calls yield identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Interior gradients are released once propagated.
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut da = Tensor2::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut da, 0.0);
                    let mut db = Tensor2::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut db, 0.0);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    let vb_shape = self.value(*b).shape();
                    let db = if vb_shape == g.shape() {
                        g.clone()
                    } else {
                        let mut row = Tensor2::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, v) in row.data_mut().iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        row
                    };
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut da = g.clone();
                    for (d, y) in da.data_mut().iter_mut().zip(vb.data()) {
                        *d *= y;
                    }
                    let mut db = g;
                    for (d, x) in db.data_mut().iter_mut().zip(va.data()) {
                        *d *= x;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (d, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (d, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    for (d, x) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= sigmoid(*x);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts, axis) => match axis {
                    Axis::Cols => {
                        let mut off = 0;
                        for p in parts {
                            let (r, c) = self.value(*p).shape();
                            let part = Tensor2::from_fn(r, c, |i, j| g.get(i, off + j));
                            off += c;
                            accumulate(&mut grads, *p, part);
                        }
                    }
                    Axis::Rows => {
                        let mut off = 0;
                        for p in parts {
                            let r = self.value(*p).rows();
                            accumulate(&mut grads, *p, g.slice_rows(off, r));
                            off += r;
                        }
                    }
                },
                Op::Slice {
                    src,
                    axis,
                    start,
                    len,
                } => {
                    let (r, c) = self.value(*src).shape();
                    let slot = grads[src.0].get_or_insert_with(|| Tensor2::zeros(r, c));
                    match axis {
                        Axis::Rows => {
                            let dst = &mut slot.data_mut()[start * c..(start + len) * c];
                            for (d, v) in dst.iter_mut().zip(g.data()) {
                                *d += v;
                            }
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                let dst = &mut slot.row_mut(i)[*start..start + len];
                                for (d, v) in dst.iter_mut().zip(g.row(i)) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::SumSquares(a) => {
                    let s = g.get(0, 0);
                    let d = self.value(*a).map(|v| 2.0 * s * v);
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(AutodiffError::NonFiniteValue { op: "backward" });
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

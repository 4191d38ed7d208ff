//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records primitive operations eagerly (define-by-run): each
//! builder call computes the forward value immediately and appends one node.
//! Values are row-major matrices; vectors are (n x 1), scalars (1 x 1).
//! Backward replays the record in reverse, accumulating parameter gradients
//! into a [`ParamSet`] and exposing per-node cotangents for input leaves.
//!
//! Tapes are per-evaluation and cheap to drop; parameters persist across
//! evaluations. Repeated backward passes over one tape accumulate additively,
//! which is what the two-phase optimization scheme relies on.

use std::any::Any;
use std::sync::Arc;

use rayon::prelude::*;

use super::param::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryFn<T> {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    Square,
    Tanh,
    Sigmoid { beta: T },
    Softplus { beta: T },
}

impl<T: Real> UnaryFn<T> {
    fn eval(self, x: T) -> T {
        match self {
            UnaryFn::Sin => x.sin(),
            UnaryFn::Cos => x.cos(),
            UnaryFn::Exp => x.exp(),
            UnaryFn::Ln => x.ln(),
            UnaryFn::Sqrt => x.sqrt(),
            UnaryFn::Abs => x.abs(),
            UnaryFn::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryFn::Square => x * x,
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Sigmoid { beta } => stable_sigmoid(beta * x),
            UnaryFn::Softplus { beta } => stable_softplus(x, beta),
        }
    }

    /// d(eval)/dx given input x and output z.
    fn deriv(self, x: T, z: T) -> T {
        match self {
            UnaryFn::Sin => x.cos(),
            UnaryFn::Cos => -x.sin(),
            UnaryFn::Exp => z,
            UnaryFn::Ln => T::one() / x,
            UnaryFn::Sqrt => T::of(0.5) / z,
            UnaryFn::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            UnaryFn::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryFn::Square => T::of(2.0) * x,
            UnaryFn::Tanh => T::one() - z * z,
            UnaryFn::Sigmoid { beta } => beta * z * (T::one() - z),
            UnaryFn::Softplus { beta } => stable_sigmoid(beta * x),
        }
    }
}

pub fn stable_sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

pub fn stable_softplus<T: Real>(x: T, beta: T) -> T {
    let t = beta * x;
    if t > T::of(30.0) {
        x
    } else if t < T::of(-30.0) {
        t.exp() / beta
    } else {
        t.exp().ln_1p() / beta
    }
}

/// Read-only view of a node's value used by custom ops.
#[derive(Clone, Copy)]
pub struct ValueRef<'a, T> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [T],
}

pub struct CustomOut<T> {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<T>,
    pub saved: Option<Box<dyn Any + Send + Sync>>,
}

/// An operation whose forward pass is opaque to the tape but carries a
/// hand-derived vector-Jacobian product. Grid queries, the axis-angle
/// rotation, batched 3x3 solves and the soft rasterizer plug in here.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[ValueRef<'_, T>]) -> CustomOut<T>;

    /// Returns one gradient buffer per input (empty vec = no flow).
    fn backward(
        &self,
        inputs: &[ValueRef<'_, T>],
        output: ValueRef<'_, T>,
        out_grad: &[T],
        saved: Option<&(dyn Any + Send + Sync)>,
    ) -> Vec<Vec<T>>;
}

enum Op<T> {
    Input,
    Constant,
    Param { id: ParamId, offset: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    Sum(NodeId),
    Unary(NodeId, UnaryFn<T>),
    Dot(NodeId, NodeId),
    Cross(NodeId, NodeId),
    ColCross(NodeId, NodeId),
    ColDot(NodeId, NodeId),
    ColNorms(NodeId),
    ColSqNorms(NodeId),
    ColNormalize(NodeId),
    ScaleCols(NodeId, NodeId),
    Solve3(NodeId, NodeId),
    Inverse3(NodeId),
    Custom {
        inputs: Vec<NodeId>,
        f: Arc<dyn CustomOp<T>>,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    saved: Option<Box<dyn Any + Send + Sync>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    nonfinite: Option<usize>,
}

/// Per-node cotangents produced by a backward pass; read gradients of
/// `Input` leaves from here.
pub struct NodeGrads<T> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Real> NodeGrads<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.g[id.index()].as_deref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First op index that produced a non-finite value, if any.
    pub fn nonfinite_op(&self) -> Option<usize> {
        self.nonfinite
    }

    pub fn finite_or_err(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.index()].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.index()].cols
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.index()].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let n = &self.nodes[id.index()];
        assert!(n.rows == 1 && n.cols == 1, "scalar() on non 1x1 node");
        n.value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> NodeId {
        self.push_saved(rows, cols, value, op, None)
    }

    fn push_saved(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Op<T>,
        saved: Option<Box<dyn Any + Send + Sync>>,
    ) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        if self.nonfinite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some(self.nodes.len());
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            saved,
        });
        id
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.index()];
        (n.rows, n.cols)
    }

    // ---- leaves ----

    pub fn input(&mut self, values: &[T], rows: usize, cols: usize) -> NodeId {
        assert_eq!(values.len(), rows * cols);
        self.push(rows, cols, values.to_vec(), Op::Input)
    }

    pub fn constant(&mut self, values: &[T], rows: usize, cols: usize) -> NodeId {
        assert_eq!(values.len(), rows * cols);
        self.push(rows, cols, values.to_vec(), Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.push(1, 1, vec![v], Op::Constant)
    }

    /// View of a parameter slice as an (rows x cols) leaf.
    pub fn param(
        &mut self,
        ps: &ParamSet<T>,
        id: ParamId,
        offset: usize,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        let vals = &ps.values(id)[offset..offset + rows * cols];
        self.push(rows, cols, vals.to_vec(), Op::Param { id, offset })
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (r, c) = self.shape(a);
        let v: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(r, c, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let (r, c) = self.shape(a);
        let v: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(r, c, v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.value(a).iter().map(|&x| -x).collect();
        self.push(r, c, v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.value(a).iter().map(|&x| x + s).collect();
        self.push(r, c, v, Op::AddScalar(a, s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (r, c) = self.shape(a);
        let v: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(r, c, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let (r, c) = self.shape(a);
        let v: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x / y)
            .collect();
        self.push(r, c, v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut v = vec![T::zero(); m * n];
        gemm_nn(self.value(a), m, k, self.value(b), n, &mut v);
        self.push(m, n, v, Op::MatMul(a, b))
    }

    /// X (m x n) plus a column vector b (m x 1) broadcast over columns.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let (mb, nb) = self.shape(b);
        assert!(mb == m && nb == 1, "add_bias shape mismatch");
        let xv = self.value(x);
        let bv = self.value(b);
        let mut v = vec![T::zero(); m * n];
        for i in 0..m {
            let bi = bv[i];
            for j in 0..n {
                v[i * n + j] = xv[i * n + j] + bi;
            }
        }
        self.push(m, n, v, Op::AddBias(x, b))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.cols(parts[0]);
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.cols(p), cols, "concat_rows col mismatch");
            rows += self.rows(p);
        }
        let mut v = Vec::with_capacity(rows * cols);
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.push(rows, cols, v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.rows(parts[0]);
        let mut cols = 0;
        for &p in parts {
            assert_eq!(self.rows(p), rows, "concat_cols row mismatch");
            cols += self.cols(p);
        }
        let mut v = vec![T::zero(); rows * cols];
        let mut c0 = 0;
        for &p in parts {
            let pc = self.cols(p);
            let pv = self.value(p);
            for i in 0..rows {
                for j in 0..pc {
                    v[i * cols + c0 + j] = pv[i * pc + j];
                }
            }
            c0 += pc;
        }
        self.push(rows, cols, v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(r0 < r1 && r1 <= m, "slice_rows out of range");
        let v = self.value(a)[r0 * n..r1 * n].to_vec();
        self.push(r1 - r0, n, v, Op::SliceRows(a, r0, r1))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn unary(&mut self, a: NodeId, f: UnaryFn<T>) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<T> = self.value(a).iter().map(|&x| f.eval(x)).collect();
        self.push(r, c, v, Op::Unary(a, f))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Sin)
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Cos)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Abs)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Square)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Sqrt)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryFn::Relu)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .fold(T::zero(), |acc, x| acc + x);
        self.push(1, 1, vec![s], Op::Dot(a, b))
    }

    pub fn cross(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), (3, 1), "cross expects 3x1");
        assert_eq!(self.shape(b), (3, 1), "cross expects 3x1");
        let (x, y) = (self.value(a), self.value(b));
        let v = vec![
            x[1] * y[2] - x[2] * y[1],
            x[2] * y[0] - x[0] * y[2],
            x[0] * y[1] - x[1] * y[0],
        ];
        self.push(3, 1, v, Op::Cross(a, b))
    }

    /// Columnwise cross product of two 3xN matrices.
    pub fn col_cross(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, n) = self.shape(a);
        assert_eq!(r, 3);
        assert_eq!(self.shape(b), (3, n), "col_cross shape mismatch");
        let (x, y) = (self.value(a), self.value(b));
        let mut v = vec![T::zero(); 3 * n];
        for j in 0..n {
            let (x0, x1, x2) = (x[j], x[n + j], x[2 * n + j]);
            let (y0, y1, y2) = (y[j], y[n + j], y[2 * n + j]);
            v[j] = x1 * y2 - x2 * y1;
            v[n + j] = x2 * y0 - x0 * y2;
            v[2 * n + j] = x0 * y1 - x1 * y0;
        }
        self.push(3, n, v, Op::ColCross(a, b))
    }

    /// Columnwise dot product: (m x n, m x n) -> 1 x n.
    pub fn col_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "col_dot shape mismatch");
        let (x, y) = (self.value(a), self.value(b));
        let mut v = vec![T::zero(); n];
        for j in 0..n {
            let mut s = T::zero();
            for i in 0..m {
                s += x[i * n + j] * y[i * n + j];
            }
            v[j] = s;
        }
        self.push(1, n, v, Op::ColDot(a, b))
    }

    /// Columnwise Euclidean norms: (m x n) -> 1 x n.
    pub fn col_norms(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![T::zero(); n];
        for j in 0..n {
            let mut s = T::zero();
            for i in 0..m {
                let t = x[i * n + j];
                s += t * t;
            }
            v[j] = s.sqrt();
        }
        self.push(1, n, v, Op::ColNorms(a))
    }

    pub fn col_sq_norms(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![T::zero(); n];
        for j in 0..n {
            let mut s = T::zero();
            for i in 0..m {
                let t = x[i * n + j];
                s += t * t;
            }
            v[j] = s;
        }
        self.push(1, n, v, Op::ColSqNorms(a))
    }

    /// Normalize each column to unit length.
    pub fn col_normalize(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut v = vec![T::zero(); m * n];
        for j in 0..n {
            let mut s = T::zero();
            for i in 0..m {
                let t = x[i * n + j];
                s += t * t;
            }
            let r = s.sqrt();
            let inv = if r > T::zero() { T::one() / r } else { T::zero() };
            for i in 0..m {
                v[i * n + j] = x[i * n + j] * inv;
            }
        }
        self.push(m, n, v, Op::ColNormalize(a))
    }

    /// Scale column j of X (m x n) by s[j] (1 x n).
    pub fn scale_cols(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(s), (1, n), "scale_cols shape mismatch");
        let xv = self.value(x);
        let sv = self.value(s);
        let mut v = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] = xv[i * n + j] * sv[j];
            }
        }
        self.push(m, n, v, Op::ScaleCols(x, s))
    }

    /// Solve the 3x3 system A x = b; backward uses the adjoint-solve rule.
    pub fn solve3(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), (3, 3), "solve3 expects 3x3");
        assert_eq!(self.shape(b), (3, 1), "solve3 expects 3x1 rhs");
        let x = solve3_raw(self.value(a), self.value(b));
        self.push(3, 1, x.to_vec(), Op::Solve3(a, b))
    }

    pub fn inverse3(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.shape(a), (3, 3), "inverse3 expects 3x3");
        let inv = inverse3_raw(self.value(a));
        self.push(3, 3, inv.to_vec(), Op::Inverse3(a))
    }

    pub fn custom(&mut self, inputs: &[NodeId], f: Arc<dyn CustomOp<T>>) -> NodeId {
        let views: Vec<ValueRef<'_, T>> = inputs
            .iter()
            .map(|&i| {
                let n = &self.nodes[i.index()];
                ValueRef {
                    rows: n.rows,
                    cols: n.cols,
                    data: &n.value,
                }
            })
            .collect();
        let out = f.forward(&views);
        assert_eq!(out.value.len(), out.rows * out.cols, "custom op shape");
        self.push_saved(
            out.rows,
            out.cols,
            out.value,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            out.saved,
        )
    }

    // ---- backward ----

    /// Seed `seed_node` with a full cotangent and accumulate parameter
    /// gradients into `params`. May be called repeatedly; contributions add.
    pub fn backward(
        &self,
        seed_node: NodeId,
        seed: &[T],
        params: &mut ParamSet<T>,
    ) -> NodeGrads<T> {
        let n = &self.nodes[seed_node.index()];
        assert_eq!(seed.len(), n.rows * n.cols, "seed shape mismatch");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[seed_node.index()] = Some(seed.to_vec());

        for idx in (0..=seed_node.index()).rev() {
            let Some(og) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &og, &mut grads, params);
            grads[idx] = Some(og);
        }
        NodeGrads { g: grads }
    }

    pub fn backward_scalar(
        &self,
        seed_node: NodeId,
        seed: T,
        params: &mut ParamSet<T>,
    ) -> NodeGrads<T> {
        self.backward(seed_node, &[seed], params)
    }

    /// Consuming variant: the tape is destroyed after the pass, so it cannot
    /// be replayed by mistake.
    pub fn backward_consume(
        self,
        seed_node: NodeId,
        seed: T,
        params: &mut ParamSet<T>,
    ) -> NodeGrads<T> {
        self.backward_scalar(seed_node, seed, params)
    }

    fn accum(grads: &mut Vec<Option<Vec<T>>>, nodes: &[Node<T>], id: NodeId, delta: &[T]) {
        let slot = &mut grads[id.index()];
        let g = slot.get_or_insert_with(|| {
            let n = &nodes[id.index()];
            vec![T::zero(); n.rows * n.cols]
        });
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        og: &[T],
        grads: &mut Vec<Option<Vec<T>>>,
        params: &mut ParamSet<T>,
    ) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Param { id, offset } => {
                let g = &mut params.grad_mut(*id)[*offset..*offset + og.len()];
                for (gi, &d) in g.iter_mut().zip(og) {
                    *gi += d;
                }
            }
            Op::Add(a, b) => {
                Self::accum(grads, nodes, *a, og);
                Self::accum(grads, nodes, *b, og);
            }
            Op::Sub(a, b) => {
                Self::accum(grads, nodes, *a, og);
                let neg: Vec<T> = og.iter().map(|&x| -x).collect();
                Self::accum(grads, nodes, *b, &neg);
            }
            Op::Neg(a) => {
                let neg: Vec<T> = og.iter().map(|&x| -x).collect();
                Self::accum(grads, nodes, *a, &neg);
            }
            Op::Scale(a, s) => {
                let d: Vec<T> = og.iter().map(|&x| x * *s).collect();
                Self::accum(grads, nodes, *a, &d);
            }
            Op::AddScalar(a, _) => {
                Self::accum(grads, nodes, *a, og);
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                let da: Vec<T> = og.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = og.iter().zip(av).map(|(&g, &x)| g * x).collect();
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::Div(a, b) => {
                let bv = &nodes[b.index()].value;
                let zv = &node.value;
                let da: Vec<T> = og.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                let db: Vec<T> = og
                    .iter()
                    .zip(zv.iter().zip(bv))
                    .map(|(&g, (&z, &y))| -g * z / y)
                    .collect();
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.index()].rows, nodes[a.index()].cols);
                let n = nodes[b.index()].cols;
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                // dA += dZ * B^T
                let mut da = vec![T::zero(); m * k];
                gemm_nt(og, m, n, bv, k, &mut da);
                Self::accum(grads, nodes, *a, &da);
                // dB += A^T * dZ
                let mut db = vec![T::zero(); k * n];
                gemm_tn(av, m, k, og, n, &mut db);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::AddBias(x, b) => {
                Self::accum(grads, nodes, *x, og);
                let (m, n) = (node.rows, node.cols);
                let mut db = vec![T::zero(); m];
                for i in 0..m {
                    let mut s = T::zero();
                    for j in 0..n {
                        s += og[i * n + j];
                    }
                    db[i] = s;
                }
                Self::accum(grads, nodes, *b, &db);
            }
            Op::ConcatRows(parts) => {
                let n = node.cols;
                let mut r0 = 0;
                for &p in parts {
                    let pr = nodes[p.index()].rows;
                    Self::accum(grads, nodes, p, &og[r0 * n..(r0 + pr) * n]);
                    r0 += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let cols = node.cols;
                let mut c0 = 0;
                for &p in parts {
                    let pc = nodes[p.index()].cols;
                    let mut d = vec![T::zero(); rows * pc];
                    for i in 0..rows {
                        for j in 0..pc {
                            d[i * pc + j] = og[i * cols + c0 + j];
                        }
                    }
                    Self::accum(grads, nodes, p, &d);
                    c0 += pc;
                }
            }
            Op::SliceRows(a, r0, _r1) => {
                let an = &nodes[a.index()];
                let mut d = vec![T::zero(); an.rows * an.cols];
                d[r0 * an.cols..r0 * an.cols + og.len()].copy_from_slice(og);
                Self::accum(grads, nodes, *a, &d);
            }
            Op::Sum(a) => {
                let an = &nodes[a.index()];
                let d = vec![og[0]; an.rows * an.cols];
                Self::accum(grads, nodes, *a, &d);
            }
            Op::Unary(a, f) => {
                let av = &nodes[a.index()].value;
                let zv = &node.value;
                let d: Vec<T> = og
                    .iter()
                    .zip(av.iter().zip(zv))
                    .map(|(&g, (&x, &z))| g * f.deriv(x, z))
                    .collect();
                Self::accum(grads, nodes, *a, &d);
            }
            Op::Dot(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                let g = og[0];
                let da: Vec<T> = bv.iter().map(|&y| g * y).collect();
                let db: Vec<T> = av.iter().map(|&x| g * x).collect();
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::Cross(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                // da += b x og, db += og x a
                let da = cross3(bv, og);
                let db = cross3(og, av);
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::ColCross(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                let n = node.cols;
                let mut da = vec![T::zero(); 3 * n];
                let mut db = vec![T::zero(); 3 * n];
                for j in 0..n {
                    let bj = [bv[j], bv[n + j], bv[2 * n + j]];
                    let aj = [av[j], av[n + j], av[2 * n + j]];
                    let gj = [og[j], og[n + j], og[2 * n + j]];
                    let daj = cross3(&bj, &gj);
                    let dbj = cross3(&gj, &aj);
                    for i in 0..3 {
                        da[i * n + j] = daj[i];
                        db[i * n + j] = dbj[i];
                    }
                }
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::ColDot(a, b) => {
                let av = &nodes[a.index()].value;
                let bv = &nodes[b.index()].value;
                let (m, n) = (nodes[a.index()].rows, nodes[a.index()].cols);
                let mut da = vec![T::zero(); m * n];
                let mut db = vec![T::zero(); m * n];
                for j in 0..n {
                    let g = og[j];
                    for i in 0..m {
                        da[i * n + j] = g * bv[i * n + j];
                        db[i * n + j] = g * av[i * n + j];
                    }
                }
                Self::accum(grads, nodes, *a, &da);
                Self::accum(grads, nodes, *b, &db);
            }
            Op::ColNorms(a) => {
                let av = &nodes[a.index()].value;
                let zv = &node.value;
                let (m, n) = (nodes[a.index()].rows, nodes[a.index()].cols);
                let mut da = vec![T::zero(); m * n];
                for j in 0..n {
                    let r = zv[j];
                    if r > T::zero() {
                        let s = og[j] / r;
                        for i in 0..m {
                            da[i * n + j] = s * av[i * n + j];
                        }
                    }
                }
                Self::accum(grads, nodes, *a, &da);
            }
            Op::ColSqNorms(a) => {
                let av = &nodes[a.index()].value;
                let (m, n) = (nodes[a.index()].rows, nodes[a.index()].cols);
                let mut da = vec![T::zero(); m * n];
                for j in 0..n {
                    let s = T::of(2.0) * og[j];
                    for i in 0..m {
                        da[i * n + j] = s * av[i * n + j];
                    }
                }
                Self::accum(grads, nodes, *a, &da);
            }
            Op::ColNormalize(a) => {
                let av = &nodes[a.index()].value;
                let zv = &node.value;
                let (m, n) = (node.rows, node.cols);
                let mut da = vec![T::zero(); m * n];
                for j in 0..n {
                    let mut r2 = T::zero();
                    for i in 0..m {
                        let t = av[i * n + j];
                        r2 += t * t;
                    }
                    let r = r2.sqrt();
                    if r <= T::zero() {
                        continue;
                    }
                    let mut zdotg = T::zero();
                    for i in 0..m {
                        zdotg += zv[i * n + j] * og[i * n + j];
                    }
                    for i in 0..m {
                        da[i * n + j] = (og[i * n + j] - zv[i * n + j] * zdotg) / r;
                    }
                }
                Self::accum(grads, nodes, *a, &da);
            }
            Op::ScaleCols(x, s) => {
                let xv = &nodes[x.index()].value;
                let sv = &nodes[s.index()].value;
                let (m, n) = (node.rows, node.cols);
                let mut dx = vec![T::zero(); m * n];
                let mut ds = vec![T::zero(); n];
                for j in 0..n {
                    let sj = sv[j];
                    let mut acc = T::zero();
                    for i in 0..m {
                        dx[i * n + j] = og[i * n + j] * sj;
                        acc += og[i * n + j] * xv[i * n + j];
                    }
                    ds[j] = acc;
                }
                Self::accum(grads, nodes, *x, &dx);
                Self::accum(grads, nodes, *s, &ds);
            }
            Op::Solve3(a, b) => {
                let av = &nodes[a.index()].value;
                let xv = &node.value;
                // s = A^-T og ; db += s ; dA += -s x^T
                let at = transpose3(av);
                let s = solve3_raw(&at, og);
                Self::accum(grads, nodes, *b, &s);
                let mut da = vec![T::zero(); 9];
                for i in 0..3 {
                    for j in 0..3 {
                        da[i * 3 + j] = -s[i] * xv[j];
                    }
                }
                Self::accum(grads, nodes, *a, &da);
            }
            Op::Inverse3(a) => {
                // dA += -X^T og X^T with X = A^-1
                let xv = &node.value;
                let xt = transpose3(xv);
                let tmp = matmul3(&xt, og);
                let prod = matmul3(&tmp, &xt);
                let da: Vec<T> = prod.iter().map(|&v| -v).collect();
                Self::accum(grads, nodes, *a, &da);
            }
            Op::Custom { inputs, f } => {
                let views: Vec<ValueRef<'_, T>> = inputs
                    .iter()
                    .map(|&i| {
                        let n = &nodes[i.index()];
                        ValueRef {
                            rows: n.rows,
                            cols: n.cols,
                            data: &n.value,
                        }
                    })
                    .collect();
                let out_view = ValueRef {
                    rows: node.rows,
                    cols: node.cols,
                    data: &node.value,
                };
                let in_grads = f.backward(&views, out_view, og, node.saved.as_deref());
                assert_eq!(in_grads.len(), inputs.len(), "custom backward arity");
                for (&inp, d) in inputs.iter().zip(&in_grads) {
                    if !d.is_empty() {
                        Self::accum(grads, nodes, inp, d);
                    }
                }
            }
        }
    }
}

/// Builds a scalar-valued computation and returns (value, tape, output node).
/// Fails when any intermediate is non-finite, naming the op index.
pub fn forward_scalar<T: Real, F>(build: F) -> Result<(T, Tape<T>, NodeId)>
where
    F: FnOnce(&mut Tape<T>) -> NodeId,
{
    let mut tape = Tape::new();
    let out = build(&mut tape);
    tape.finite_or_err()?;
    let (r, c) = (tape.rows(out), tape.cols(out));
    if r != 1 || c != 1 {
        return Err(Error::invalid(format!(
            "forward_scalar output must be 1x1, got {r}x{c}"
        )));
    }
    let v = tape.scalar(out);
    Ok((v, tape, out))
}

// ---- small dense kernels ----

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C (m x n) += A (m x k) * B (k x n)
pub fn gemm_nn<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let work = m * k * n;
    let row = |ci: &mut [T], ai: &[T]| {
        for (kk, &aik) in ai.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                ci[j] += aik * brow[j];
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for i in 0..m {
            row(&mut c[i * n..i * n + n], &a[i * k..i * k + k]);
        }
    }
}

/// C (m x k) += A (m x n) * B^T where B is (k x n)
pub fn gemm_nt<T: Real>(a: &[T], m: usize, n: usize, b: &[T], k: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let work = m * n * k;
    let row = |ci: &mut [T], ai: &[T]| {
        for j in 0..k {
            let brow = &b[j * n..j * n + n];
            let mut s = T::zero();
            for l in 0..n {
                s += ai[l] * brow[l];
            }
            ci[j] += s;
        }
    };
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(|(ci, ai)| row(ci, ai));
    } else {
        for i in 0..m {
            row(&mut c[i * k..i * k + k], &a[i * n..i * n + n]);
        }
    }
}

/// C (k x n) += A^T * B where A is (m x k), B is (m x n)
pub fn gemm_tn<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let work = m * k * n;
    if work >= PAR_FLOP_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| {
            for l in 0..m {
                let ali = a[l * k + i];
                if ali == T::zero() {
                    continue;
                }
                let brow = &b[l * n..l * n + n];
                for j in 0..n {
                    ci[j] += ali * brow[j];
                }
            }
        });
    } else {
        for l in 0..m {
            let arow = &a[l * k..l * k + k];
            let brow = &b[l * n..l * n + n];
            for (i, &ali) in arow.iter().enumerate() {
                if ali == T::zero() {
                    continue;
                }
                let ci = &mut c[i * n..i * n + n];
                for j in 0..n {
                    ci[j] += ali * brow[j];
                }
            }
        }
    }
}

fn cross3<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    vec![
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn transpose3<T: Real>(a: &[T]) -> Vec<T> {
    vec![a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

fn matmul3<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut c = vec![T::zero(); 9];
    for i in 0..3 {
        for kk in 0..3 {
            let aik = a[i * 3 + kk];
            for j in 0..3 {
                c[i * 3 + j] += aik * b[kk * 3 + j];
            }
        }
    }
    c
}

/// Cramer solve of a row-major 3x3 system; NaNs on a singular matrix, which
/// the tape's finite check then flags.
pub fn solve3_raw<T: Real>(a: &[T], b: &[T]) -> [T; 3] {
    let det = |c0: &[T; 3], c1: &[T; 3], c2: &[T; 3]| -> T {
        c0[0] * (c1[1] * c2[2] - c1[2] * c2[1]) - c1[0] * (c0[1] * c2[2] - c0[2] * c2[1])
            + c2[0] * (c0[1] * c1[2] - c0[2] * c1[1])
    };
    let c0 = [a[0], a[3], a[6]];
    let c1 = [a[1], a[4], a[7]];
    let c2 = [a[2], a[5], a[8]];
    let bb = [b[0], b[1], b[2]];
    let d = det(&c0, &c1, &c2);
    [
        det(&bb, &c1, &c2) / d,
        det(&c0, &bb, &c2) / d,
        det(&c0, &c1, &bb) / d,
    ]
}

pub fn inverse3_raw<T: Real>(a: &[T]) -> [T; 9] {
    let m = |i: usize, j: usize| a[i * 3 + j];
    let cof = |i: usize, j: usize| -> T {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        m(i1, j1) * m(i2, j2) - m(i1, j2) * m(i2, j1)
    };
    let d = m(0, 0) * cof(0, 0) + m(0, 1) * cof(0, 1) + m(0, 2) * cof(0, 2);
    let mut out = [T::zero(); 9];
    for i in 0..3 {
        for j in 0..3 {
            out[j * 3 + i] = cof(i, j) / d;
        }
    }
    out
}

//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records every forward operation in execution order. Parameter
//! leaves borrow their values from a [`ParamStore`], so building a graph
//! never copies weights. [`Tape::backward`] walks the nodes in exact reverse
//! order and returns one gradient per trainable parameter.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({shapes})")]
    ShapeMismatch { op: OpKind, shapes: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: OpKind },
    #[error("{op}: {msg}")]
    Invalid { op: OpKind, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of 64-bit floats. Rank 0 (scalar), 1 or 2.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Named collection of model tensors. Ids are dense indices in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics if the name is taken, since that is always a
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            requires_grad,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Bitwise equality of all values; used by determinism checks.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape == b.value.shape
                    && a.value
                        .data
                        .iter()
                        .zip(&b.value.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Concat,
    Sum,
    AbsDiff,
    SoftmaxNll,
    GradReverse,
    Scale,
    OneMinus,
    GatherRow,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::AbsDiff => "abs_diff",
            OpKind::SoftmaxNll => "softmax_nll",
            OpKind::GradReverse => "grad_reverse",
            OpKind::Scale => "scale",
            OpKind::OneMinus => "one_minus",
            OpKind::GatherRow => "gather_row",
        };
        f.write_str(name)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    AbsDiff(Var, Var),
    SoftmaxNll { logits: Var, target: usize, probs: Vec<f64> },
    GradReverse { input: Var, lambda: f64 },
    Scale(Var, f64),
    OneMinus(Var),
    GatherRow { table: Var, row: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Param(_) | Op::Constant => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat(_) => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
            Op::AbsDiff(..) => OpKind::AbsDiff,
            Op::SoftmaxNll { .. } => OpKind::SoftmaxNll,
            Op::GradReverse { .. } => OpKind::GradReverse,
            Op::Scale(..) => OpKind::Scale,
            Op::OneMinus(_) => OpKind::OneMinus,
            Op::GatherRow { .. } => OpKind::GatherRow,
        }
    }
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    needs_grad: bool,
}

/// Gradient per parameter. Frozen parameters map to `None`; trainable
/// parameters that the loss does not reach hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_for(params: &ParamStore) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, p)| p.requires_grad.then(|| Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(a), Some(b)) = (mine.as_mut(), theirs.as_ref()) {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in &mut g.data {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Records operations; values of parameter leaves are borrowed for `'p`.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" vs ")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.to_vec(),
        }
    }

    /// Probabilities cached by a softmax-NLL node.
    pub fn softmax_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxNll { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Cow<'p, [f64]>, needs_grad: bool) -> Result<Var> {
        let kind = op.kind();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: kind });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: p.value.shape.clone(),
            value: Cow::Borrowed(&p.value.data),
            needs_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t.shape, Cow::Owned(t.data), false)
    }

    /// Constant that borrows its data, e.g. a frozen embedding row.
    pub fn constant_ref(&mut self, data: &'p [f64]) -> Result<Var> {
        self.push(Op::Constant, vec![data.len()], Cow::Borrowed(data), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || AutodiffError::ShapeMismatch {
            op: OpKind::MatMul,
            shapes: shape_str(&[&sa, &sb]),
        };
        if sa.len() != 2 {
            return Err(err());
        }
        let (m, k) = (sa[0], sa[1]);
        let (out_shape, n) = match sb.as_slice() {
            [kb] if *kb == k => (vec![m], 1),
            [kb, n] if *kb == k => (vec![m, *n], *n),
            _ => return Err(err()),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            if n == 1 {
                out[i] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
            } else {
                let o = &mut out[i * n..(i + 1) * n];
                for (kk, &x) in row.iter().enumerate() {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (oj, &bj) in o.iter_mut().zip(brow) {
                        *oj += x * bj;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out_shape, Cow::Owned(out), ng)
    }

    fn binary_same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                shapes: shape_str(&[self.shape(a), self.shape(b)]),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.binary_same_shape(op.kind(), a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(op, shape, Cow::Owned(out), ng)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(op, shape, Cow::Owned(out), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::AbsDiff(a, b), a, b, |x, y| (x - y).abs())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.map(Op::OneMinus(a), a, |x| 1.0 - x)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.map(Op::Scale(a, factor), a, |x| x * factor)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        self.map(Op::GradReverse { input: a, lambda }, a, |x| x)
    }

    /// Concatenates rank-1 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() || parts.iter().any(|&p| self.shape(p).len() != 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Concat,
                shapes: shape_str(&parts.iter().map(|&p| self.shape(p)).collect::<Vec<_>>()),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let len = out.len();
        self.push(Op::Concat(parts.to_vec()), vec![len], Cow::Owned(out), ng)
    }

    /// Elementwise sum of a non-empty list of equally shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Invalid {
                op: OpKind::Sum,
                msg: "empty input list".into(),
            });
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpKind::Sum,
                    shapes: shape_str(&[&shape, self.shape(p)]),
                });
            }
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Sum(parts.to_vec()), shape, Cow::Owned(out), ng)
    }

    /// Mean of a non-empty list of equally shaped tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.sum(parts)?;
        self.scale(s, 1.0 / parts.len() as f64)
    }

    /// Row `row` of a rank-2 table.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || row >= shape[0] {
            return Err(AutodiffError::Invalid {
                op: OpKind::GatherRow,
                msg: format!("row {row} out of range for table {shape:?}"),
            });
        }
        let cols = shape[1];
        let out = self.value(table)[row * cols..(row + 1) * cols].to_vec();
        let ng = self.ng(table);
        self.push(Op::GatherRow { table, row }, vec![cols], Cow::Owned(out), ng)
    }

    /// Fused softmax + negative log-likelihood of class `target`; scalar output.
    pub fn softmax_nll(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.shape(logits).len() != 1 || target >= self.value(logits).len() {
            return Err(AutodiffError::Invalid {
                op: OpKind::SoftmaxNll,
                msg: format!(
                    "target {target} invalid for logits of shape {:?}",
                    self.shape(logits)
                ),
            });
        }
        let probs = softmax(self.value(logits));
        let z = self.value(logits);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let ng = self.ng(logits);
        self.push(
            Op::SoftmaxNll {
                logits,
                target,
                probs,
            },
            Vec::new(),
            Cow::Owned(vec![loss]),
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var, params: &ParamStore) -> Result<Gradients> {
        if !self.shape(loss).is_empty() && self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_for(params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let n = self.nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += f(i);
                }
            };
            match &node.op {
                Op::Param(id) => {
                    if let Some(t) = out.grads[id.0].as_mut() {
                        for (x, y) in t.data.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let sa = self.shape(*a);
                    let (m, k) = (sa[0], sa[1]);
                    let n = if self.shape(*b).len() == 1 {
                        1
                    } else {
                        self.shape(*b)[1]
                    };
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                        let slot = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            let srow = &mut slot[i * k..(i + 1) * k];
                            if n == 1 {
                                let gv = gi[0];
                                if gv != 0.0 {
                                    for (s, &bk) in srow.iter_mut().zip(bv) {
                                        *s += gv * bk;
                                    }
                                }
                            } else {
                                for (kk, s) in srow.iter_mut().enumerate() {
                                    let brow = &bv[kk * n..(kk + 1) * n];
                                    *s += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB[kk,j] = sum_i A[i,kk] * g[i,j]
                        let slot = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            let gi = &g[i * n..(i + 1) * n];
                            for (kk, &a_ik) in arow.iter().enumerate() {
                                let srow = &mut slot[kk * n..(kk + 1) * n];
                                for (s, &gj) in srow.iter_mut().zip(gi) {
                                    *s += a_ik * gj;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &|i| g[i]);
                    acc(*b, &|i| g[i]);
                }
                Op::Sub(a, b) => {
                    acc(*a, &|i| g[i]);
                    acc(*b, &|i| -g[i]);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, &|i| g[i] * bv[i]);
                    acc(*b, &|i| g[i] * av[i]);
                }
                Op::AbsDiff(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // subgradient 0 at a == b
                    let sign = |i: usize| {
                        let d = av[i] - bv[i];
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    acc(*a, &|i| g[i] * sign(i));
                    acc(*b, &|i| -g[i] * sign(i));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(*a, &|i| g[i] * y[i] * (1.0 - y[i]));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, &|i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(*a, &|i| if x[i] > 0.0 { g[i] } else { 0.0 });
                }
                Op::OneMinus(a) => acc(*a, &|i| -g[i]),
                Op::Scale(a, f) => acc(*a, &|i| g[i] * f),
                Op::GradReverse { input, lambda } => acc(*input, &|i| -lambda * g[i]),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        acc(*p, &|i| g[offset + i]);
                        offset += len;
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(*p, &|i| g[i]);
                    }
                }
                Op::GatherRow { table, row } => {
                    if self.nodes[table.0].needs_grad {
                        let n = self.nodes[table.0].value.len();
                        let cols = g.len();
                        let slot = grads[table.0].get_or_insert_with(|| vec![0.0; n]);
                        for (s, v) in slot[row * cols..(row + 1) * cols].iter_mut().zip(&g) {
                            *s += v;
                        }
                    }
                }
                Op::SoftmaxNll {
                    logits,
                    target,
                    probs,
                } => {
                    let g0 = g[0];
                    acc(*logits, &|i| {
                        g0 * (probs[i] - if i == *target { 1.0 } else { 0.0 })
                    });
                }
            }
        }
        Ok(out)
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

/// Numerically stable softmax (max shift).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |p: &Param| p.requires_grad.then(|| vec![0.0; p.value.len()]);
        Self {
            config,
            t: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m.get(id.0).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.v.get(id.0).and_then(|v| v.as_deref())
    }

    /// Applies one update in place. Nothing is mutated if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(params.get(id).name.clone()));
            }
            if g.shape() != params.get(id).value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: OpKind::Leaf,
                    shapes: shape_str(&[g.shape(), params.get(id).value.shape()]),
                });
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(Vec::new);
            let v = self.v[id.0].get_or_insert_with(Vec::new);
            // parameters that grew (embedding rows) start with zero moments
            m.resize(g.len(), 0.0);
            v.resize(g.len(), 0.0);
            for (((theta, &gi), mi), vi) in p
                .value
                .data
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn abs_difference_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![3.0, -1.0])).unwrap();
        let y = tape.abs_diff(a, b).unwrap();
        assert_eq!(tape.value(y), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_nll_of_uniform_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let l = tape.softmax_nll(z, 0).unwrap();
        assert_relative_eq!(tape.value(l)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(tape.value(l)[0], 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![1.0])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add: shape mismatch"), "{err}");
        let w = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let err = tape.matmul(w, a).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[3, 4]"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1e308])).unwrap();
        let err = tape.scale(a, 10.0).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: OpKind::Scale });
    }

    #[test]
    fn linear_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 1, vec![5.0]).unwrap(), true);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let x = tape.constant(Tensor::vector(vec![2.0])).unwrap();
        let y = tape.matmul(wv, x).unwrap();
        let loss = tape.sum(&[y]).unwrap();
        let loss = tape.scale(loss, 1.0).unwrap();
        // shape [1] is accepted as a scalar
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]), true);
        let b = store.add("b", Tensor::vector(vec![3.0]), true);
        let frozen = store.add("c", Tensor::vector(vec![3.0]), false);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _ = tape.param(&store, b);
        let l = tape.softmax_nll(av, 1).unwrap();
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0]);
        assert!(g.get(frozen).is_none());
        assert!(g.get(a).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(a, &store),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn grad_reverse_flips_sign() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![0.3, -0.2]), true);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let r = tape.grad_reverse(xv, 1.0).unwrap();
        assert_eq!(tape.value(r), &[0.3, -0.2]);
        // d/dx sum(c * r) with c = upstream gradient [0.3, -0.2]
        let c = tape.constant(Tensor::vector(vec![0.3, -0.2])).unwrap();
        let prod = tape.mul(r, c).unwrap();
        let w = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let s = tape.matmul(w, prod).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-0.3, 0.2]);
    }

    #[test]
    fn adam_first_step_matches_reference() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![0.0]), true);
        let mut grads = Gradients::zeros_for(&store);
        grads.grads[0] = Some(Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(adam.step_count(), 1);
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert_relative_eq!(store.get(id).value.data()[0], expected, epsilon = 1e-15);
        assert_relative_eq!(adam.first_moment(id).unwrap()[0], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![0.7, -1.5]), true);
        let grads = Gradients::zeros_for(&store);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get(id).value.data(), &[0.7, -1.5]);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let mut s1 = ParamStore::new();
        s1.add("theta", Tensor::vector(vec![0.7, -1.5]), true);
        let mut s2 = s1.clone();
        let mut grads = Gradients::zeros_for(&s1);
        grads.grads[0] = Some(Tensor::vector(vec![0.25, -3.0]));
        let mut a1 = Adam::new(AdamConfig::default(), &s1);
        let mut a2 = a1.clone();
        a1.step(&mut s1, &grads).unwrap();
        a2.step(&mut s2, &grads).unwrap();
        assert!(s1.bitwise_eq(&s2));
        assert_eq!(a1, a2);

        grads.grads[0] = Some(Tensor::vector(vec![f64::NAN, 0.0]));
        let before = s1.clone();
        let err = a1.step(&mut s1, &grads).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient("theta".into()));
        assert!(s1.bitwise_eq(&before));
        assert_eq!(a1.step_count(), 1);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[3.0, -1.0, 0.5, 100.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. Nodes only reference earlier nodes, so the tape is a
//! topologically ordered DAG and a single reverse sweep accumulates exactly
//! one gradient per node.
//!
//! ```
//! use splitvit::autograd::Tape;
//! use splitvit::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
//! let y = x.mul(x).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_rows, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Constant,
    /// `[.., p] x [p, q]`, leading axes flattened into rows.
    MatMul { a: usize, b: usize },
    /// Per-group `[m, p] x [p, q]` (or `[q, p]` transposed).
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    /// `b` broadcast over the leading axes of `a`.
    AddBroadcast { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Transpose { a: usize },
    Reshape { a: usize },
    Softmax { a: usize },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        normalized: Tensor,
        rstd: Vec<f64>,
    },
    Gelu { a: usize },
    ConcatLast { parts: Vec<usize> },
    SliceLast { a: usize, start: usize },
    GatherRows { a: usize, indices: Vec<Vec<usize>> },
    PrependRow { a: usize, row: usize },
    MeanRows { a: usize },
    GroupMean { a: usize, groups: Vec<Vec<usize>> },
    Sum { a: usize },
    SoftCrossEntropy { logits: usize, targets: Tensor, probs: Tensor },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(value, op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let value = output.value();
        if value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(output, Tensor::ones(value.shape()))
    }

    /// Reverse sweep seeded with an explicit output gradient, used when the
    /// downstream half of the computation lives elsewhere.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        assert!(std::ptr::eq(output.tape, self), "variable from another tape");
        let nodes = self.nodes.borrow();
        nodes[output.id].value.expect_same_shape("backward seed", &seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (parent, contribution) in node.op.backward(&nodes, &node.value, &g) {
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulated gradients from one reverse sweep, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a variable, `None` when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a variable, zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    /// `self [.., p] x w [p, q] -> [.., q]`.
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&w);
        let (a, b) = (self.value(), w.value());
        let p = a.cols();
        if b.ndim() != 2 || b.shape()[0] != p {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let q = b.shape()[1];
        let rows = a.len() / p;
        let mut out = vec![0.0; rows * q];
        gemm(
            rows,
            p,
            q,
            (a.data(), p as isize, 1),
            (b.data(), q as isize, 1),
            (&mut out, q as isize),
            0.0,
        );
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = q;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a: self.id, b: w.id },
        ))
    }

    /// Batched product over matching leading axes: `[.., m, p] x [.., p, q]`,
    /// or `[.., m, p] x [.., q, p]^T` when `trans_b` is set.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, p) = (a.rows(), a.cols());
        let (bp, q) = if trans_b {
            (b.cols(), b.rows())
        } else {
            (b.rows(), b.cols())
        };
        if a.ndim() < 2
            || b.ndim() != a.ndim()
            || a.shape()[..a.ndim() - 2] != b.shape()[..b.ndim() - 2]
            || bp != p
        {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape()),
            ));
        }
        let groups = a.outer();
        let mut out = vec![0.0; groups * m * q];
        let (rsb, csb) = if trans_b { (1, p as isize) } else { (q as isize, 1) };
        for g in 0..groups {
            gemm(
                m,
                p,
                q,
                (&a.data()[g * m * p..], p as isize, 1),
                (&b.data()[g * p * q..], rsb, csb),
                (&mut out[g * m * q..(g + 1) * m * q], q as isize),
                0.0,
            );
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = q;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.push(out, Op::Add { a: self.id, b: other.id }))
    }

    /// Adds `other`, whose shape equals a trailing suffix of `self`'s shape,
    /// to every leading slice.
    pub fn add_broadcast(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (an, bn) = (a.ndim(), b.ndim());
        if bn > an || a.shape()[an - bn..] != *b.shape() {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", a.shape(), b.shape()),
            ));
        }
        let mut out = a.data().to_vec();
        for chunk in out.chunks_exact_mut(b.len()) {
            for (x, y) in chunk.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::AddBroadcast { a: self.id, b: other.id },
        ))
    }

    /// Adds a per-feature bias vector along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        if bias.value().ndim() != 1 {
            return Err(Error::shape("add_bias", "bias must be a vector"));
        }
        self.add_broadcast(bias)
    }

    /// Adds a per-token embedding table `[n, d]` to every sample of `[B, n, d]`.
    pub fn embedding_add(self, table: Var<'t>) -> Result<Var<'t>> {
        if table.value().ndim() != 2 {
            return Err(Error::shape("embedding_add", "table must be [n, d]"));
        }
        self.add_broadcast(table)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.tape.push(out, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.tape.push(out, Op::Scale { a: self.id, factor })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.push(out, Op::Transpose { a: self.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { a: self.id }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let out = softmax_rows(&self.value());
        self.tape.push(out, Op::Softmax { a: self.id })
    }

    /// Normalises each last-axis vector to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let a = self.value();
        let d = a.cols();
        let (g, b) = (gain.value(), bias.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("features {d}, gain {:?}, bias {:?}", g.shape(), b.shape()),
            ));
        }
        let rows = a.len() / d;
        let mut normalized = vec![0.0; a.len()];
        let mut out = vec![0.0; a.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &a.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(inv);
            for j in 0..d {
                let xh = (x[j] - mean) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let shape = a.shape().to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(shape.clone(), out),
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized: Tensor::from_parts(shape, normalized),
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let out = self
            .value()
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.tape.push(out, Op::Gelu { a: self.id })
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_last", "nothing to concatenate"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].ndim() - 1];
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p);
            if &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", values[0].shape(), v.shape()),
                ));
            }
        }
        let rows = values[0].len() / values[0].cols();
        let width: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &values {
                let c = v.cols();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(first.tape.push(
            Tensor::from_parts(shape, out),
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.cols();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{} of {c}", start + len),
            ));
        }
        let rows = a.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::SliceLast { a: self.id, start },
        ))
    }

    /// Selects rows per group: `[G, n, d]` with `indices[g]` of length `k`
    /// gives `[G, k, d]`.
    pub fn gather_rows(self, indices: Vec<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let (n, d, groups) = (a.rows(), a.cols(), a.outer());
        if a.ndim() != 3 || indices.len() != groups {
            return Err(Error::shape(
                "gather_rows",
                format!("{:?} with {} index lists", a.shape(), indices.len()),
            ));
        }
        let k = indices[0].len();
        if k == 0 || indices.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= n)) {
            return Err(Error::shape(
                "gather_rows",
                format!("index lists must share a nonzero length and stay below {n}"),
            ));
        }
        let mut out = Vec::with_capacity(groups * k * d);
        for (g, ix) in indices.iter().enumerate() {
            for &i in ix {
                let start = (g * n + i) * d;
                out.extend_from_slice(&a.data()[start..start + d]);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![groups, k, d], out),
            Op::GatherRows { a: self.id, indices },
        ))
    }

    /// Prepends a shared row vector `[d]` to every group of `[G, n, d]`.
    pub fn prepend_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row);
        let (a, r) = (self.value(), row.value());
        let d = a.cols();
        if a.ndim() != 3 || r.len() != d {
            return Err(Error::shape(
                "prepend_row",
                format!("{:?} with row {:?}", a.shape(), r.shape()),
            ));
        }
        let (groups, n) = (a.outer(), a.rows());
        let mut out = Vec::with_capacity(groups * (n + 1) * d);
        for g in 0..groups {
            out.extend_from_slice(r.data());
            out.extend_from_slice(&a.data()[g * n * d..(g + 1) * n * d]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![groups, n + 1, d], out),
            Op::PrependRow { a: self.id, row: row.id },
        ))
    }

    /// Mean over the second-to-last axis: `[.., n, d] -> [.., d]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() < 2 {
            return Err(Error::shape("mean_rows", "needs at least two axes"));
        }
        let (n, d) = (a.rows(), a.cols());
        let mut out = vec![0.0; a.outer() * d];
        for (g, o) in out.chunks_exact_mut(d).enumerate() {
            for i in 0..n {
                let row = &a.data()[(g * n + i) * d..(g * n + i + 1) * d];
                for (x, y) in o.iter_mut().zip(row) {
                    *x += y;
                }
            }
            o.iter_mut().for_each(|x| *x /= n as f64);
        }
        let nd = a.ndim();
        let mut shape: Vec<usize> = a.shape()[..nd - 2].to_vec();
        shape.push(d);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::MeanRows { a: self.id },
        ))
    }

    /// Averages slices of the first axis per group: `[B, ..]` -> `[T, ..]`.
    pub fn group_mean(self, groups: Vec<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let batch = a.shape()[0];
        if groups.is_empty()
            || groups
                .iter()
                .any(|g| g.is_empty() || g.iter().any(|&i| i >= batch))
        {
            return Err(Error::shape(
                "group_mean",
                format!("groups must be nonempty and index below {batch}"),
            ));
        }
        let inner = a.len() / batch;
        let mut out = vec![0.0; groups.len() * inner];
        for (o, members) in out.chunks_exact_mut(inner).zip(&groups) {
            for &m in members {
                for (x, y) in o.iter_mut().zip(&a.data()[m * inner..(m + 1) * inner]) {
                    *x += y;
                }
            }
            let size = members.len() as f64;
            o.iter_mut().for_each(|x| *x /= size);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = groups.len();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::GroupMean { a: self.id, groups },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum { a: self.id })
    }

    /// Mean over rows of `-sum_j targets[j] * log_softmax(logits)[j]`.
    pub fn soft_cross_entropy(self, targets: &Tensor) -> Result<Var<'t>> {
        let logits = self.value();
        if logits.ndim() != 2 {
            return Err(Error::shape("soft_cross_entropy", "logits must be [T, L]"));
        }
        logits.expect_same_shape("soft_cross_entropy", targets)?;
        let probs = softmax_rows(&logits);
        let l = logits.cols();
        let rows = logits.rows();
        let mut total = 0.0;
        for r in 0..rows {
            let z = &logits.data()[r * l..(r + 1) * l];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..l {
                let y = targets.data()[r * l + j];
                if y != 0.0 {
                    total -= y * (z[j] - lse);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftCrossEntropy {
                logits: self.id,
                targets: targets.clone(),
                probs,
            },
        ))
    }
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBroadcast { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::PrependRow { a, row } => vec![*a, *row],
            Op::LayerNorm { a, gain, bias, .. } => vec![*a, *gain, *bias],
            Op::ConcatLast { parts } => parts.clone(),
            Op::Scale { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Softmax { a }
            | Op::Gelu { a }
            | Op::SliceLast { a, .. }
            | Op::GatherRows { a, .. }
            | Op::MeanRows { a }
            | Op::GroupMean { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Gradient contributions to each parent that requires one.
    fn backward(&self, nodes: &[Node], out: &Tensor, g: &Tensor) -> Vec<(usize, Tensor)> {
        let wants = |id: usize| nodes[id].requires_grad;
        let val = |id: usize| &*nodes[id].value;
        let mut res = Vec::with_capacity(2);
        match self {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.len() / p;
                if wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    gemm(
                        rows,
                        q,
                        p,
                        (g.data(), q as isize, 1),
                        (bv.data(), 1, q as isize),
                        (&mut da, p as isize),
                        0.0,
                    );
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if wants(*b) {
                    let mut db = vec![0.0; p * q];
                    gemm(
                        p,
                        rows,
                        q,
                        (av.data(), 1, p as isize),
                        (g.data(), q as isize, 1),
                        (&mut db, q as isize),
                        0.0,
                    );
                    res.push((*b, Tensor::from_parts(vec![p, q], db)));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, p) = (av.rows(), av.cols());
                let q = out.cols();
                let groups = av.outer();
                if wants(*a) {
                    // da = g . B^T
                    let (rs, cs) = if *trans_b { (p as isize, 1) } else { (1, q as isize) };
                    let mut da = vec![0.0; av.len()];
                    for gi in 0..groups {
                        gemm(
                            m,
                            q,
                            p,
                            (&g.data()[gi * m * q..], q as isize, 1),
                            (&bv.data()[gi * p * q..], rs, cs),
                            (&mut da[gi * m * p..(gi + 1) * m * p], p as isize),
                            0.0,
                        );
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for gi in 0..groups {
                        let ag = &av.data()[gi * m * p..];
                        let gg = &g.data()[gi * m * q..];
                        let dst = &mut db[gi * p * q..(gi + 1) * p * q];
                        if *trans_b {
                            // db = g^T . a, shape [q, p]
                            gemm(q, m, p, (gg, 1, q as isize), (ag, p as isize, 1), (dst, p as isize), 0.0);
                        } else {
                            // db = a^T . g, shape [p, q]
                            gemm(p, m, q, (ag, 1, p as isize), (gg, q as isize, 1), (dst, q as isize), 0.0);
                        }
                    }
                    res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    res.push((*a, g.clone()));
                }
                if wants(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::AddBroadcast { a, b } => {
                if wants(*a) {
                    res.push((*a, g.clone()));
                }
                if wants(*b) {
                    let bv = val(*b);
                    let mut db = vec![0.0; bv.len()];
                    for chunk in g.data().chunks_exact(bv.len()) {
                        for (x, y) in db.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    res.push((*b, Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    res.push((*a, g.zip_map(val(*b), |x, y| x * y).unwrap()));
                }
                if wants(*b) {
                    res.push((*b, g.zip_map(val(*a), |x, y| x * y).unwrap()));
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    res.push((*a, g.map(|x| x * factor)));
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let t = g.transpose();
                    res.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), t.into_data())));
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    res.push((*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec())));
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let c = out.cols();
                    let mut da = vec![0.0; out.len()];
                    for ((y, gy), dx) in out
                        .data()
                        .chunks_exact(c)
                        .zip(g.data().chunks_exact(c))
                        .zip(da.chunks_exact_mut(c))
                    {
                        let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[j] = y[j] * (gy[j] - inner);
                        }
                    }
                    res.push((*a, Tensor::from_parts(out.shape().to_vec(), da)));
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = out.cols();
                let gv = val(*gain);
                if wants(*a) {
                    let mut da = vec![0.0; out.len()];
                    for (r, inv) in rstd.iter().enumerate() {
                        let xh = &normalized.data()[r * d..(r + 1) * d];
                        let gy = &g.data()[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gy.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let sum_dxh: f64 = dxh.iter().sum();
                        let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            da[r * d + j] = inv / d as f64
                                * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    res.push((*a, Tensor::from_parts(out.shape().to_vec(), da)));
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (xh, gy) in normalized.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += xh[j] * gy[j];
                        }
                    }
                    res.push((*gain, Tensor::from_parts(vec![d], dg)));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; d];
                    for gy in g.data().chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gy[j];
                        }
                    }
                    res.push((*bias, Tensor::from_parts(vec![d], db)));
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let da = val(*a)
                        .zip_map(g, |x, gy| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .unwrap();
                    res.push((*a, da));
                }
            }
            Op::ConcatLast { parts } => {
                let width = out.cols();
                let rows = out.len() / width;
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                        }
                        res.push((p, Tensor::from_parts(pv.shape().to_vec(), dp)));
                    }
                    offset += c;
                }
            }
            Op::SliceLast { a, start } => {
                if wants(*a) {
                    let av = val(*a);
                    let (c, len) = (av.cols(), out.cols());
                    let mut da = vec![0.0; av.len()];
                    for (r, gy) in g.data().chunks_exact(len).enumerate() {
                        da[r * c + start..r * c + start + len].copy_from_slice(gy);
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
            }
            Op::GatherRows { a, indices } => {
                if wants(*a) {
                    let av = val(*a);
                    let (n, d) = (av.rows(), av.cols());
                    let k = out.rows();
                    let mut da = vec![0.0; av.len()];
                    for (gi, ix) in indices.iter().enumerate() {
                        for (slot, &i) in ix.iter().enumerate() {
                            let src = &g.data()[(gi * k + slot) * d..(gi * k + slot + 1) * d];
                            let dst = &mut da[(gi * n + i) * d..(gi * n + i + 1) * d];
                            for (x, y) in dst.iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
            }
            Op::PrependRow { a, row } => {
                let av = val(*a);
                let (n, d) = (av.rows(), av.cols());
                if wants(*a) {
                    let mut da = Vec::with_capacity(av.len());
                    for gi in 0..av.outer() {
                        da.extend_from_slice(&g.data()[(gi * (n + 1) + 1) * d..(gi + 1) * (n + 1) * d]);
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if wants(*row) {
                    let mut dr = vec![0.0; d];
                    for gi in 0..av.outer() {
                        for (x, y) in dr.iter_mut().zip(&g.data()[gi * (n + 1) * d..]) {
                            *x += y;
                        }
                    }
                    res.push((*row, Tensor::from_parts(val(*row).shape().to_vec(), dr)));
                }
            }
            Op::MeanRows { a } => {
                if wants(*a) {
                    let av = val(*a);
                    let (n, d) = (av.rows(), av.cols());
                    let mut da = Vec::with_capacity(av.len());
                    for gy in g.data().chunks_exact(d) {
                        for _ in 0..n {
                            da.extend(gy.iter().map(|x| x / n as f64));
                        }
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
            }
            Op::GroupMean { a, groups } => {
                if wants(*a) {
                    let av = val(*a);
                    let inner = av.len() / av.shape()[0];
                    let mut da = vec![0.0; av.len()];
                    for (gy, members) in g.data().chunks_exact(inner).zip(groups) {
                        let size = members.len() as f64;
                        for &m in members {
                            for (x, y) in da[m * inner..(m + 1) * inner].iter_mut().zip(gy) {
                                *x += y / size;
                            }
                        }
                    }
                    res.push((*a, Tensor::from_parts(av.shape().to_vec(), da)));
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    res.push((*a, Tensor::full(val(*a).shape(), g.item())));
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let l = probs.cols();
                    let rows = probs.rows();
                    let scale = g.item() / rows as f64;
                    let mut dz = vec![0.0; probs.len()];
                    for r in 0..rows {
                        let y = &targets.data()[r * l..(r + 1) * l];
                        let mass: f64 = y.iter().sum();
                        for j in 0..l {
                            dz[r * l + j] = scale * (probs.data()[r * l + j] * mass - y[j]);
                        }
                    }
                    res.push((*logits, Tensor::from_parts(probs.shape().to_vec(), dz)));
                }
            }
        }
        res
    }
}

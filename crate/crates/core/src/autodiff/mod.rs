//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation as a node in a Wengert list; a
//! [`Tensor`] is a cheap copyable handle into that list. Calling
//! [`Tape::backward`] on a scalar output walks the list in reverse and
//! accumulates gradients into every node that requires them. Gradients on
//! leaves accumulate across repeated `backward` calls until
//! [`Tape::zero_grads`] is invoked.
//!
//! Conventions:
//!
//! - All values are `f64`; shapes are row-major.
//! - Elementwise binary ops broadcast only when one operand's shape is a
//!   *suffix* of the other's (e.g. `[N, D] op [D]`, or any shape against a
//!   scalar `[]`). The smaller operand cycles over the trailing block.
//! - Reductions over the last axis (`sum_last`, `softmax_last`,
//!   `min_last`, `layer_norm`) treat the tensor as rows of its final
//!   dimension.
//! - `min_last` breaks ties by the lowest index.
//! - Shape mismatches are programming errors and panic with a message;
//!   fallible I/O and user input live behind `Result` elsewhere.
//!
//! The [`finite_diff_check`] harness re-evaluates a closure under central
//! differences and reports the worst relative gradient error, defined as
//! `|analytic - numeric| / max(1, |analytic|)`.

mod kernels;

use std::sync::Arc;

pub use kernels::{matmul_nn, matmul_nt, matmul_tn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(u32);

impl Tensor {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    SliceRows(Tensor, usize, usize),
    SliceCols(Tensor, usize, usize),
    GatherRows(Tensor, Arc<Vec<usize>>),
    GatherFlat(Tensor, Arc<Vec<i64>>),
    SumAll(Tensor),
    MeanAll(Tensor),
    VarAll(Tensor),
    SumLast(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Clamp(Tensor, f64, f64),
    SoftmaxLast(Tensor),
    LayerNorm(Tensor, Tensor, Tensor),
    L2NormRows(Tensor),
    MinLast(Tensor),
    Sin(Tensor),
    Cos(Tensor),
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Saved integer indices (argmin of `MinLast`).
    Idx(Vec<usize>),
    /// Saved per-row statistics (`LayerNorm`: mean, inv_std interleaved).
    Stats(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires: bool,
    aux: Aux,
}

/// Wengert-list recording tape. Single-threaded; create one per
/// differentiated evaluation (they are cheap) or reuse and `reset`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into (rows, row_len) over the last axis.
fn last_axis(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&d, rest)) => (numel(rest), d),
        None => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes, keeping allocations.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires: bool, aux: Aux) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "internal: shape {:?} vs data length {}",
            shape,
            data.len()
        );
        let id = self.nodes.len();
        assert!(id <= u32::MAX as usize, "tape overflow");
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires,
            aux,
        });
        Tensor(id as u32)
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.idx()]
    }

    /// Creates a leaf. `requires_grad` marks it for gradient accumulation.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad, Aux::None)
    }

    /// Creates an untracked constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Tensor {
        self.leaf(shape, data, false)
    }

    /// Untracked scalar constant (shape `[]`).
    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(&[], vec![v])
    }

    /// Copies a tensor's current value into a fresh untracked leaf,
    /// severing it from the graph. Used to stop gradients (e.g. feeding
    /// generator outputs to discriminator losses).
    pub fn detach(&mut self, t: Tensor) -> Tensor {
        let shape = self.node(t).shape.clone();
        let data = self.node(t).data.clone();
        self.constant(&shape, data)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.node(t).shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.node(t).data
    }

    /// Scalar value of a `[]`- or single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        let n = self.node(t);
        assert_eq!(n.data.len(), 1, "scalar_value on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.node(t).grad.as_deref()
    }

    /// Clears gradients on every node.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise binary ops with suffix broadcasting ----

    fn binary(&mut self, a: Tensor, b: Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        let (out_shape, a_big) = broadcast_shape(sa, sb);
        let (da, db) = (&self.node(a).data, &self.node(b).data);
        let data: Vec<f64> = if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if a_big {
            let lb = db.len().max(1);
            da.iter().enumerate().map(|(i, &x)| f(x, db[i % lb])).collect()
        } else {
            let la = da.len().max(1);
            db.iter().enumerate().map(|(i, &y)| f(da[i % la], y)).collect()
        };
        let req = self.node(a).requires || self.node(b).requires;
        self.push(op, out_shape, data, req, Aux::None)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary ops ----

    fn unary(&mut self, a: Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| f(x)).collect();
        let shape = self.node(a).shape.clone();
        let req = self.node(a).requires;
        self.push(op, shape, data, req, Aux::None)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn sin(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Clamps into `[lo, hi]`. Gradient passes only strictly inside the
    /// interval.
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise square.
    pub fn square(&mut self, a: Tensor) -> Tensor {
        self.mul(a, a)
    }

    // ---- linear algebra / structure ----

    /// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let sa = self.node(a).shape.clone();
        let sb = self.node(b).shape.clone();
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands, got {sa:?} x {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul_nn(&self.node(a).data, &self.node(b).data, m, k, n, &mut data);
        let req = self.node(a).requires || self.node(b).requires;
        self.push(Op::MatMul(a, b), vec![m, n], data, req, Aux::None)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let s = self.node(a).shape.clone();
        assert_eq!(s.len(), 2, "transpose needs a 2-D tensor, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = &self.node(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let req = self.node(a).requires;
        self.push(Op::Transpose(a), vec![c, r], data, req, Aux::None)
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&mut self, a: Tensor, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.node(a).data.len(),
            "reshape to {:?} from {:?}",
            shape,
            self.node(a).shape
        );
        let data = self.node(a).data.clone();
        let req = self.node(a).requires;
        self.push(Op::Reshape(a), shape.to_vec(), data, req, Aux::None)
    }

    /// Concatenates along `axis`. All inputs must agree on every other
    /// dimension.
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.node(parts[0]).shape.clone();
        assert!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.node(p).shape;
            assert_eq!(s.len(), first.len(), "concat rank mismatch: {s:?} vs {first:?}");
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat dim {d} mismatch: {s:?} vs {first:?}");
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.node(p);
                let block = n.shape[axis] * inner;
                data.extend_from_slice(&n.data[o * block..(o + 1) * block]);
            }
        }
        let req = parts.iter().any(|&p| self.node(p).requires);
        self.push(Op::Concat(parts.to_vec(), axis), out_shape, data, req, Aux::None)
    }

    /// Rows `[a, b)` along the first axis.
    pub fn slice_rows(&mut self, t: Tensor, a: usize, b: usize) -> Tensor {
        let s = self.node(t).shape.clone();
        assert!(!s.is_empty(), "slice_rows on scalar");
        assert!(a <= b && b <= s[0], "slice_rows [{a},{b}) of {s:?}");
        let inner: usize = s[1..].iter().product();
        let data = self.node(t).data[a * inner..b * inner].to_vec();
        let mut out_shape = s;
        out_shape[0] = b - a;
        let req = self.node(t).requires;
        self.push(Op::SliceRows(t, a, b), out_shape, data, req, Aux::None)
    }

    /// Columns `[a, b)` of a 2-D tensor.
    pub fn slice_cols(&mut self, t: Tensor, a: usize, b: usize) -> Tensor {
        let s = self.node(t).shape.clone();
        assert_eq!(s.len(), 2, "slice_cols needs 2-D, got {s:?}");
        assert!(a <= b && b <= s[1], "slice_cols [{a},{b}) of {s:?}");
        let (rows, cols) = (s[0], s[1]);
        let w = b - a;
        let src = &self.node(t).data;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + a..r * cols + b]);
        }
        let req = self.node(t).requires;
        self.push(Op::SliceCols(t, a, b), vec![rows, w], data, req, Aux::None)
    }

    /// Gathers rows of a 2-D tensor by index (duplicates allowed; backward
    /// accumulates).
    pub fn gather_rows(&mut self, t: Tensor, idx: &[usize]) -> Tensor {
        let s = self.node(t).shape.clone();
        assert_eq!(s.len(), 2, "gather_rows needs 2-D, got {s:?}");
        let (rows, cols) = (s[0], s[1]);
        let src = &self.node(t).data;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let req = self.node(t).requires;
        self.push(
            Op::GatherRows(t, Arc::new(idx.to_vec())),
            vec![idx.len(), cols],
            data,
            req,
            Aux::None,
        )
    }

    /// Gathers elements by flattened index; `-1` yields `0.0` (zero
    /// padding). The index vector is shared, so repeated use (e.g. im2col
    /// patterns) costs one reference count.
    pub fn gather_flat(&mut self, t: Tensor, idx: Arc<Vec<i64>>) -> Tensor {
        let n = self.node(t).data.len() as i64;
        let src = &self.node(t).data;
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i < 0 {
                data.push(0.0);
            } else {
                assert!(i < n, "gather_flat index {i} out of {n}");
                data.push(src[i as usize]);
            }
        }
        let shape = vec![idx.len()];
        let req = self.node(t).requires;
        self.push(Op::GatherFlat(t, idx), shape, data, req, Aux::None)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let s: f64 = self.node(a).data.iter().sum();
        let req = self.node(a).requires;
        self.push(Op::SumAll(a), vec![], vec![s], req, Aux::None)
    }

    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let d = &self.node(a).data;
        assert!(!d.is_empty(), "mean_all of empty tensor");
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let req = self.node(a).requires;
        self.push(Op::MeanAll(a), vec![], vec![m], req, Aux::None)
    }

    /// Population variance over all elements.
    pub fn var_all(&mut self, a: Tensor) -> Tensor {
        let d = &self.node(a).data;
        assert!(!d.is_empty(), "var_all of empty tensor");
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
        let req = self.node(a).requires;
        self.push(Op::VarAll(a), vec![], vec![v], req, Aux::None)
    }

    /// Sums over the last axis: `[..., D] -> [...]`.
    pub fn sum_last(&mut self, a: Tensor) -> Tensor {
        let s = self.node(a).shape.clone();
        let (rows, d) = last_axis(&s);
        let src = &self.node(a).data;
        let data: Vec<f64> = (0..rows).map(|r| src[r * d..(r + 1) * d].iter().sum()).collect();
        let out_shape = s[..s.len().saturating_sub(1)].to_vec();
        let req = self.node(a).requires;
        self.push(Op::SumLast(a), out_shape, data, req, Aux::None)
    }

    /// Softmax over the last axis (max-shifted for stability).
    pub fn softmax_last(&mut self, a: Tensor) -> Tensor {
        let s = self.node(a).shape.clone();
        let (rows, d) = last_axis(&s);
        assert!(d > 0, "softmax over empty axis");
        let src = &self.node(a).data;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mx).exp();
                sum += *o;
            }
            for o in &mut data[r * d..(r + 1) * d] {
                *o /= sum;
            }
        }
        let req = self.node(a).requires;
        self.push(Op::SoftmaxLast(a), s, data, req, Aux::None)
    }

    /// Layer normalization over the last axis with learned gain and bias
    /// (both shaped `[D]`): `g * (x - mean) / sqrt(var + eps) + b`.
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Tensor {
        let s = self.node(x).shape.clone();
        let (rows, d) = last_axis(&s);
        assert_eq!(self.node(gain).shape, &[d], "layer_norm gain shape");
        assert_eq!(self.node(bias).shape, &[d], "layer_norm bias shape");
        let src = &self.node(x).data;
        let g = &self.node(gain).data;
        let b = &self.node(bias).data;
        let mut data = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push(mean);
            stats.push(inv_std);
            for j in 0..d {
                data[r * d + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let req = self.node(x).requires || self.node(gain).requires || self.node(bias).requires;
        self.push(Op::LayerNorm(x, gain, bias), s, data, req, Aux::Stats(stats))
    }

    /// Euclidean norm of each row: `[N, D] -> [N]`.
    pub fn l2_norm_rows(&mut self, a: Tensor) -> Tensor {
        let s = self.node(a).shape.clone();
        assert_eq!(s.len(), 2, "l2_norm_rows needs 2-D, got {s:?}");
        let (rows, d) = (s[0], s[1]);
        let src = &self.node(a).data;
        let data: Vec<f64> = (0..rows)
            .map(|r| src[r * d..(r + 1) * d].iter().map(|&x| x * x).sum::<f64>().sqrt())
            .collect();
        let req = self.node(a).requires;
        self.push(Op::L2NormRows(a), vec![rows], data, req, Aux::None)
    }

    /// Minimum over the last axis with its argmin (ties resolve to the
    /// lowest index). Returns `(values, argmin)`.
    pub fn min_last(&mut self, a: Tensor) -> (Tensor, Vec<usize>) {
        let s = self.node(a).shape.clone();
        let (rows, d) = last_axis(&s);
        assert!(d > 0, "min_last over empty axis");
        let src = &self.node(a).data;
        let mut data = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            arg.push(best);
        }
        let out_shape = s[..s.len().saturating_sub(1)].to_vec();
        let req = self.node(a).requires;
        let t = self.push(Op::MinLast(a), out_shape, data, req, Aux::Idx(arg.clone()));
        (t, arg)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar output. Panics if `out` is not a single
    /// element. Accumulates into existing gradients.
    pub fn backward(&mut self, out: Tensor) {
        assert_eq!(
            self.node(out).data.len(),
            1,
            "backward requires a scalar output, got shape {:?}",
            self.node(out).shape
        );
        let start = out.idx();
        // Seed.
        {
            let n = &mut self.nodes[start];
            if !n.requires {
                return;
            }
            n.grad.get_or_insert_with(|| vec![0.0; 1])[0] += 1.0;
        }
        for i in (0..=start).rev() {
            if !self.nodes[i].requires
                || self.nodes[i].grad.is_none()
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            // Interior gradients are consumed by the sweep; only leaves keep
            // theirs, so repeated backward calls accumulate exactly one unit
            // pass each.
            let g = node.grad.take().unwrap();
            backprop(node, &g, head);
        }
    }
}

/// Determines the broadcast output shape; returns `(shape, a_is_larger)`.
fn broadcast_shape(a: &[usize], b: &[usize]) -> (Vec<usize>, bool) {
    if a == b {
        return (a.to_vec(), true);
    }
    if is_suffix(b, a) {
        return (a.to_vec(), true);
    }
    if is_suffix(a, b) {
        return (b.to_vec(), false);
    }
    panic!("shapes {a:?} and {b:?} are not suffix-broadcastable");
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

/// Adds `g` into the gradient of `t` (a node strictly earlier on the tape),
/// respecting suffix broadcasting: if the target is smaller than `g`, the
/// leading axes of `g` are summed out.
fn accumulate(head: &mut [Node], t: Tensor, g: &[f64]) {
    let n = &mut head[t.idx()];
    if !n.requires {
        return;
    }
    let len = n.data.len();
    let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
    if g.len() == len {
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    } else {
        debug_assert!(g.len() % len.max(1) == 0, "gradient length mismatch");
        for (i, &b) in g.iter().enumerate() {
            grad[i % len] += b;
        }
    }
}

fn backprop(node: &Node, g: &[f64], head: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(head, *a, g);
            accumulate(head, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(head, *a, g);
            let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
            accumulate(head, *b, &neg);
        }
        Op::Mul(a, b) => {
            let ga: Option<Vec<f64>> = head[a.idx()].requires.then(|| {
                let db = &head[b.idx()].data;
                let lb = db.len();
                g.iter().enumerate().map(|(i, &gv)| gv * db[i % lb]).collect()
            });
            let gb: Option<Vec<f64>> = head[b.idx()].requires.then(|| {
                let da = &head[a.idx()].data;
                let la = da.len();
                g.iter().enumerate().map(|(i, &gv)| gv * da[i % la]).collect()
            });
            if let Some(ga) = ga {
                accumulate(head, *a, &ga);
            }
            if let Some(gb) = gb {
                accumulate(head, *b, &gb);
            }
        }
        Op::Div(a, b) => {
            let ga: Option<Vec<f64>> = head[a.idx()].requires.then(|| {
                let db = &head[b.idx()].data;
                let lb = db.len();
                g.iter().enumerate().map(|(i, &gv)| gv / db[i % lb]).collect()
            });
            let gb: Option<Vec<f64>> = head[b.idx()].requires.then(|| {
                let (da, db) = (&head[a.idx()].data, &head[b.idx()].data);
                let (la, lb) = (da.len(), db.len());
                g.iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let bv = db[i % lb];
                        -gv * da[i % la] / (bv * bv)
                    })
                    .collect()
            });
            if let Some(ga) = ga {
                accumulate(head, *a, &ga);
            }
            if let Some(gb) = gb {
                accumulate(head, *b, &gb);
            }
        }
        Op::Neg(a) => {
            let ga: Vec<f64> = g.iter().map(|&x| -x).collect();
            accumulate(head, *a, &ga);
        }
        Op::Scale(a, c) => {
            let ga: Vec<f64> = g.iter().map(|&x| c * x).collect();
            accumulate(head, *a, &ga);
        }
        Op::AddScalar(a) => accumulate(head, *a, g),
        Op::MatMul(a, b) => {
            let sa = &head[a.idx()].shape;
            let sb = &head[b.idx()].shape;
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if head[a.idx()].requires {
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt(g, &head[b.idx()].data, m, n, k, &mut ga);
                accumulate(head, *a, &ga);
            }
            if head[b.idx()].requires {
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn(&head[a.idx()].data, g, m, k, n, &mut gb);
                accumulate(head, *b, &gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = {
                let s = &node.shape;
                (s[0], s[1])
            };
            // node shape is [ric, cic] = transposed; input is [c, r].
            let mut ga = vec![0.0; g.len()];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            accumulate(head, *a, &ga);
        }
        Op::Reshape(a) => accumulate(head, *a, g),
        Op::Concat(parts, axis) => {
            let first = &head[parts[0].idx()].shape;
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let blocks: Vec<usize> = parts.iter().map(|p| head[p.idx()].shape[*axis] * inner).collect();
            let total: usize = blocks.iter().sum();
            for (pi, &p) in parts.iter().enumerate() {
                if !head[p.idx()].requires {
                    continue;
                }
                let block = blocks[pi];
                let offset: usize = blocks[..pi].iter().sum();
                let mut gp = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let s = o * total + offset;
                    gp.extend_from_slice(&g[s..s + block]);
                }
                accumulate(head, p, &gp);
            }
        }
        Op::SliceRows(a, s0, s1) => {
            let src_shape = &head[a.idx()].shape;
            let inner: usize = src_shape[1..].iter().product();
            debug_assert_eq!(g.len(), (s1 - s0) * inner);
            let mut ga = vec![0.0; numel(src_shape)];
            ga[s0 * inner..s0 * inner + g.len()].copy_from_slice(g);
            accumulate(head, *a, &ga);
        }
        Op::SliceCols(a, c0, c1) => {
            let src_shape = &head[a.idx()].shape;
            let (rows, cols) = (src_shape[0], src_shape[1]);
            let w = c1 - c0;
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + c0..r * cols + c1].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            accumulate(head, *a, &ga);
        }
        Op::GatherRows(a, idx) => {
            let src_shape = &head[a.idx()].shape;
            let cols = src_shape[1];
            let mut ga = vec![0.0; numel(src_shape)];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    ga[i * cols + j] += g[r * cols + j];
                }
            }
            accumulate(head, *a, &ga);
        }
        Op::GatherFlat(a, idx) => {
            let mut ga = vec![0.0; head[a.idx()].data.len()];
            for (r, &i) in idx.iter().enumerate() {
                if i >= 0 {
                    ga[i as usize] += g[r];
                }
            }
            accumulate(head, *a, &ga);
        }
        Op::SumAll(a) => {
            let ga = vec![g[0]; head[a.idx()].data.len()];
            accumulate(head, *a, &ga);
        }
        Op::MeanAll(a) => {
            let n = head[a.idx()].data.len();
            let ga = vec![g[0] / n as f64; n];
            accumulate(head, *a, &ga);
        }
        Op::VarAll(a) => {
            let d = &head[a.idx()].data;
            let n = d.len() as f64;
            let m = d.iter().sum::<f64>() / n;
            let ga: Vec<f64> = d.iter().map(|&x| g[0] * 2.0 * (x - m) / n).collect();
            accumulate(head, *a, &ga);
        }
        Op::SumLast(a) => {
            let s = &head[a.idx()].shape;
            let (_, d) = last_axis(s);
            let mut ga = Vec::with_capacity(numel(s));
            for &gv in g {
                ga.extend(std::iter::repeat(gv).take(d));
            }
            accumulate(head, *a, &ga);
        }
        Op::Exp(a) => {
            // y = e^x saved in node.data
            let ga: Vec<f64> = g.iter().zip(&node.data).map(|(&gv, &y)| gv * y).collect();
            accumulate(head, *a, &ga);
        }
        Op::Log(a) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g.iter().zip(d).map(|(&gv, &x)| gv / x).collect();
            accumulate(head, *a, &ga);
        }
        Op::Sqrt(a) => {
            // Subgradient 0 at x = 0.
            let ga: Vec<f64> = g
                .iter()
                .zip(&node.data)
                .map(|(&gv, &y)| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                .collect();
            accumulate(head, *a, &ga);
        }
        Op::Abs(a) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g
                .iter()
                .zip(d)
                .map(|(&gv, &x)| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })
                .collect();
            accumulate(head, *a, &ga);
        }
        Op::Relu(a) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g.iter().zip(d).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
            accumulate(head, *a, &ga);
        }
        Op::Sigmoid(a) => {
            let ga: Vec<f64> = g.iter().zip(&node.data).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
            accumulate(head, *a, &ga);
        }
        Op::Clamp(a, lo, hi) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g
                .iter()
                .zip(d)
                .map(|(&gv, &x)| if x > *lo && x < *hi { gv } else { 0.0 })
                .collect();
            accumulate(head, *a, &ga);
        }
        Op::SoftmaxLast(a) => {
            let s = &node.shape;
            let (rows, d) = last_axis(s);
            let y = &node.data;
            let mut ga = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..d {
                    ga[r * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(head, *a, &ga);
        }
        Op::LayerNorm(x, gain, bias) => {
            let s = &node.shape;
            let (rows, d) = last_axis(s);
            let stats = match &node.aux {
                Aux::Stats(v) => v,
                _ => unreachable!("layer_norm aux"),
            };
            let xd = &head[x.idx()].data;
            let gd = &head[gain.idx()].data;
            let mut gx = vec![0.0; xd.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let mean = stats[2 * r];
                let inv_std = stats[2 * r + 1];
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                // xhat_j = (x_j - mean) * inv_std; dy/dxhat = gain
                let mut sum_gh = 0.0; // sum of grad * gain
                let mut sum_ghx = 0.0; // sum of grad * gain * xhat
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv_std;
                    let gh = gr[j] * gd[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat;
                    gg[j] += gr[j] * xhat;
                    gb[j] += gr[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv_std;
                    let gh = gr[j] * gd[j];
                    gx[r * d + j] = inv_std * (gh - inv_d * sum_gh - xhat * inv_d * sum_ghx);
                }
            }
            accumulate(head, *x, &gx);
            accumulate(head, *gain, &gg);
            accumulate(head, *bias, &gb);
        }
        Op::L2NormRows(a) => {
            let s = &head[a.idx()].shape;
            let (rows, d) = (s[0], s[1]);
            let xd = &head[a.idx()].data;
            let y = &node.data;
            let mut ga = vec![0.0; xd.len()];
            for r in 0..rows {
                if y[r] > 0.0 {
                    let c = g[r] / y[r];
                    for j in 0..d {
                        ga[r * d + j] = c * xd[r * d + j];
                    }
                }
            }
            accumulate(head, *a, &ga);
        }
        Op::MinLast(a) => {
            let s = &head[a.idx()].shape;
            let (_, d) = last_axis(s);
            let arg = match &node.aux {
                Aux::Idx(v) => v,
                _ => unreachable!("min_last aux"),
            };
            let mut ga = vec![0.0; head[a.idx()].data.len()];
            for (r, &j) in arg.iter().enumerate() {
                ga[r * d + j] += g[r];
            }
            accumulate(head, *a, &ga);
        }
        Op::Sin(a) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g.iter().zip(d).map(|(&gv, &x)| gv * x.cos()).collect();
            accumulate(head, *a, &ga);
        }
        Op::Cos(a) => {
            let d = &head[a.idx()].data;
            let ga: Vec<f64> = g.iter().zip(d).map(|(&gv, &x)| -gv * x.sin()).collect();
            accumulate(head, *a, &ga);
        }
    }
}

// ---- finite-difference gradient checking ----

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Worst relative error `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    /// Leaf index and flat element index where the worst error occurred.
    pub worst: (usize, usize),
}

/// Checks analytic gradients of a scalar-valued tensor program against
/// central finite differences with step `h`.
///
/// `build` receives a fresh tape and the leaves (tracked) in order, and
/// must return a scalar tensor. Every leaf element is perturbed by `±h`.
pub fn finite_diff_check<F>(leaves: &[(Vec<usize>, Vec<f64>)], h: f64, build: F) -> FiniteDiffReport
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let handles: Vec<Tensor> = leaves
        .iter()
        .map(|(s, d)| tape.leaf(s, d.clone(), true))
        .collect();
    let out = build(&mut tape, &handles);
    tape.backward(out);
    let analytic: Vec<Vec<f64>> = handles
        .iter()
        .map(|&t| tape.grad(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(t).len()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let hs: Vec<Tensor> = leaves
            .iter()
            .zip(vals)
            .map(|((s, _), d)| tape.leaf(s, d.clone(), false))
            .collect();
        let out = build(&mut tape, &hs);
        tape.scalar_value(out)
    };

    let mut vals: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| d.clone()).collect();
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for li in 0..leaves.len() {
        for ei in 0..vals[li].len() {
            let orig = vals[li][ei];
            vals[li][ei] = orig + h;
            let plus = eval(&vals);
            vals[li][ei] = orig - h;
            let minus = eval(&vals);
            vals[li][ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[li][ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (li, ei);
            }
        }
    }
    report
}

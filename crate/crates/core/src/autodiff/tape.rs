//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. Nodes only ever reference earlier nodes, so the tape is always in
//! topological order and `backward` is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-registered operation: receives the input values,
/// the output value and the output gradient, and returns one gradient buffer
/// per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    /// matrix + vector replicated across columns
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    SubBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Gather {
        input: Var,
        flat: Vec<usize>,
    },
    Select {
        mask: Vec<bool>,
        on_true: Var,
        on_false: Var,
    },
    StraightThrough(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Lanes of a reduction along `axis`: (lane count, lane length, stride, lane start fn).
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    stride: usize,
    cols: usize,
    axis: usize,
}

impl Lanes {
    fn new(t: &Tensor, axis: usize) -> Result<Self> {
        let (r, c) = t.dims2();
        match (t.rank(), axis) {
            (1, 0) => Ok(Lanes { count: 1, len: r, stride: 1, cols: 1, axis: 1 }),
            (2, 0) => Ok(Lanes { count: c, len: r, stride: c, cols: c, axis: 0 }),
            (2, 1) => Ok(Lanes { count: r, len: c, stride: 1, cols: c, axis: 1 }),
            _ => shape_err(format!("axis {axis} invalid for shape {:?}", t.shape())),
        }
    }

    fn start(&self, lane: usize) -> usize {
        if self.axis == 0 {
            lane
        } else {
            lane * self.cols
        }
    }
}

fn softmax_lanes(x: &[f64], lanes: Lanes, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for lane in 0..lanes.count {
        let s0 = lanes.start(lane);
        let idx = |i: usize| s0 + i * lanes.stride;
        let mut m = f64::NEG_INFINITY;
        for i in 0..lanes.len {
            m = m.max(x[idx(i)]);
        }
        let mut z = 0.0;
        for i in 0..lanes.len {
            z += (x[idx(i)] - m).exp();
        }
        if log {
            let lz = z.ln();
            for i in 0..lanes.len {
                out[idx(i)] = (x[idx(i)] - m) - lz;
            }
        } else {
            for i in 0..lanes.len {
                out[idx(i)] = (x[idx(i)] - m).exp() / z;
            }
        }
    }
    out
}

pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n == 1 {
        // same accumulation order as the general case, per output entry
        return (0..m)
            .map(|i| {
                let mut acc = 0.0;
                for (&av, &bv) in a[i * k..(i + 1) * k].iter().zip(b) {
                    if av != 0.0 {
                        acc += av * bv;
                    }
                }
                acc
            })
            .collect();
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_values(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), v).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient stored on a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn broadcast_ok(mat: &Tensor, vec: &Tensor) -> bool {
        let (r, _) = mat.dims2();
        let (vr, vc) = vec.dims2();
        mat.rank() == 2 && vr == r && vc == 1 && !mat.same_shape(vec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.same_shape(tb) {
            let v = zip(ta, tb, |x, y| x + y);
            Ok(self.push(v, Op::Add(a, b), rg))
        } else if Self::broadcast_ok(ta, tb) {
            let (r, c) = ta.dims2();
            let mut v = ta.values().to_vec();
            for i in 0..r {
                let bi = tb.values()[i];
                v[i * c..(i + 1) * c].iter_mut().for_each(|x| *x += bi);
            }
            let v = Tensor::new(ta.shape().to_vec(), v)?;
            Ok(self.push(v, Op::AddBroadcast(a, b), rg))
        } else {
            shape_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape()))
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.same_shape(tb) {
            let v = zip(ta, tb, |x, y| x - y);
            Ok(self.push(v, Op::Sub(a, b), rg))
        } else if Self::broadcast_ok(ta, tb) {
            let (r, c) = ta.dims2();
            let mut v = ta.values().to_vec();
            for i in 0..r {
                let bi = tb.values()[i];
                v[i * c..(i + 1) * c].iter_mut().for_each(|x| *x -= bi);
            }
            let v = Tensor::new(ta.shape().to_vec(), v)?;
            Ok(self.push(v, Op::SubBroadcast(a, b), rg))
        } else {
            shape_err(format!("sub: {:?} vs {:?}", ta.shape(), tb.shape()))
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return shape_err(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let v = zip(ta, tb, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.values().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = map(t, f64::ln);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Log(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return shape_err(format!("matmul: {:?} x {:?}", ta.shape(), tb.shape()));
        }
        let v = matmul_values(ta.values(), tb.values(), m, k, n);
        let v = Tensor::matrix(m, n, v)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let v = Tensor::matrix(c, r, transpose_values(t.values(), r, c)).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Concatenation along `axis`. Rank-1 inputs join along axis 0 into a
    /// rank-1 result; rank-2 inputs join rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return shape_err("concat of nothing");
        }
        let first = self.value(inputs[0]);
        let all_rank1 = inputs.iter().all(|&v| self.value(v).rank() == 1);
        let value = if all_rank1 {
            if axis != 0 {
                return shape_err("rank-1 concat only along axis 0");
            }
            let mut v = Vec::new();
            for &x in inputs {
                v.extend_from_slice(self.value(x).values());
            }
            Tensor::vector(v)
        } else {
            match axis {
                0 => {
                    let c = first.dims2().1;
                    let mut v = Vec::new();
                    let mut rows = 0;
                    for &x in inputs {
                        let t = self.value(x);
                        let (r, cc) = t.dims2();
                        if cc != c {
                            return shape_err(format!("concat rows: column mismatch {cc} vs {c}"));
                        }
                        rows += r;
                        v.extend_from_slice(t.values());
                    }
                    Tensor::matrix(rows, c, v)?
                }
                1 => {
                    let r = first.dims2().0;
                    let mut total = 0;
                    for &x in inputs {
                        let (rr, cc) = self.value(x).dims2();
                        if rr != r {
                            return shape_err(format!("concat cols: row mismatch {rr} vs {r}"));
                        }
                        total += cc;
                    }
                    let mut v = vec![0.0; r * total];
                    let mut off = 0;
                    for &x in inputs {
                        let t = self.value(x);
                        let (_, cc) = t.dims2();
                        for i in 0..r {
                            v[i * total + off..i * total + off + cc].copy_from_slice(&t.values()[i * cc..(i + 1) * cc]);
                        }
                        off += cc;
                    }
                    Tensor::matrix(r, total, v)?
                }
                _ => return shape_err(format!("concat axis {axis}")),
            }
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || (axis == 1 && t.rank() == 1) || len == 0 || start + len > extent {
            return shape_err(format!("slice axis {axis} [{start}, {}) of {:?}", start + len, t.shape()));
        }
        let value = if axis == 0 {
            let v = t.values()[start * c..(start + len) * c].to_vec();
            if t.rank() == 1 {
                Tensor::vector(v)
            } else {
                Tensor::matrix(len, c, v)?
            }
        } else {
            let mut v = Vec::with_capacity(r * len);
            for i in 0..r {
                v.extend_from_slice(&t.values()[i * c + start..i * c + start + len]);
            }
            Tensor::matrix(r, len, v)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.values().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Max-subtracted softmax along `axis` (0 normalizes each column of a
    /// matrix, 1 each row).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::new(t, axis)?;
        let v = Tensor::new(t.shape().to_vec(), softmax_lanes(t.values(), lanes, false))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let lanes = Lanes::new(t, axis)?;
        let v = Tensor::new(t.shape().to_vec(), softmax_lanes(t.values(), lanes, true))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// Columns `indices` of a `d x V` table, as a `d x n` matrix.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return shape_err("embedding table must be a matrix");
        }
        if indices.is_empty() {
            return contract_err("embedding lookup of empty index list");
        }
        let (d, vocab) = t.dims2();
        let n = indices.len();
        let mut v = vec![0.0; d * n];
        for (j, &ix) in indices.iter().enumerate() {
            if ix >= vocab {
                return Err(Error::Index(format!("token {ix} outside vocabulary of {vocab}")));
            }
            for i in 0..d {
                v[i * n + j] = t.values()[i * vocab + ix];
            }
        }
        let value = Tensor::matrix(d, n, v)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Embedding { table, indices: indices.to_vec() }, rg))
    }

    /// Entries at `(row, col)` positions, as a rank-1 tensor.
    pub fn gather(&mut self, a: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if positions.is_empty() {
            return contract_err("gather of no positions");
        }
        let mut flat = Vec::with_capacity(positions.len());
        for &(i, j) in positions {
            if i >= r || j >= c {
                return Err(Error::Index(format!("gather ({i}, {j}) outside {r}x{c}")));
            }
            flat.push(i * c + j);
        }
        let v = Tensor::vector(flat.iter().map(|&f| t.values()[f]).collect());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Gather { input: a, flat }, rg))
    }

    /// Elementwise `mask ? on_true : on_false`.
    pub fn select(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        let (tt, tf) = (self.value(on_true), self.value(on_false));
        if !tt.same_shape(tf) || mask.len() != tt.numel() {
            return shape_err("select: mask and operands must share a shape");
        }
        let v: Vec<f64> = mask.iter().zip(tt.values().iter().zip(tf.values())).map(|(&m, (&x, &y))| if m { x } else { y }).collect();
        let value = Tensor::new(tt.shape().to_vec(), v)?;
        let rg = self.rg(on_true) || self.rg(on_false);
        Ok(self.push(value, Op::Select { mask: mask.to_vec(), on_true, on_false }, rg))
    }

    /// Forward value is `hard`; the gradient passes to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if !self.value(soft).same_shape(&hard) {
            return shape_err("straight-through: hard and soft shapes differ");
        }
        let rg = self.rg(soft);
        Ok(self.push(hard.with_requires_grad(false), Op::StraightThrough(soft), rg))
    }

    /// Registers an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value.with_requires_grad(false), Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Populates the grad slot of every
    /// `requires_grad` leaf; leaves the loss does not reach get zeros. The
    /// tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return contract_err("tape already differentiated");
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return contract_err(format!("loss must be scalar, got shape {:?}", lt.shape()));
        }
        if lt.has_nan() {
            return Err(Error::NonFinite("loss is NaN".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::AddBroadcast(a, b) | Op::SubBroadcast(a, b) => {
                    let sign = if matches!(node.op, Op::AddBroadcast(..)) { 1.0 } else { -1.0 };
                    let (r, c) = out.dims2();
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |s| {
                        for i in 0..r {
                            s[i] += sign * g[i * c..(i + 1) * c].iter().sum::<f64>();
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).values(), val(*b).values());
                    acc(*a, &mut |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * vb[k];
                        }
                    });
                    acc(*b, &mut |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * va[k];
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y)),
                Op::Tanh(a) => acc(*a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        let y = out.values()[k];
                        *x += g[k] * (1.0 - y * y);
                    }
                }),
                Op::Sigmoid(a) => acc(*a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        let y = out.values()[k];
                        *x += g[k] * y * (1.0 - y);
                    }
                }),
                Op::Exp(a) => acc(*a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        *x += g[k] * out.values()[k];
                    }
                }),
                Op::Log(a) => {
                    let va = val(*a).values();
                    acc(*a, &mut |s| {
                        for (k, x) in s.iter_mut().enumerate() {
                            *x += g[k] / va[k];
                        }
                    })
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = ta.dims2();
                    let (_, n) = tb.dims2();
                    let (va, vb) = (ta.values(), tb.values());
                    if needs(*a) {
                        // dA = G B^T
                        acc(*a, &mut |s| {
                            for i in 0..m {
                                let gi = &g[i * n..(i + 1) * n];
                                for (p, x) in s[i * k..(i + 1) * k].iter_mut().enumerate() {
                                    *x += gi.iter().zip(&vb[p * n..(p + 1) * n]).map(|(u, v)| u * v).sum::<f64>();
                                }
                            }
                        });
                    }
                    if needs(*b) {
                        // dB = A^T G
                        acc(*b, &mut |s| {
                            for i in 0..m {
                                let ai = &va[i * k..(i + 1) * k];
                                if n == 1 {
                                    let gi = g[i];
                                    s.iter_mut().zip(ai).for_each(|(x, a)| *x += a * gi);
                                } else {
                                    let gi = &g[i * n..(i + 1) * n];
                                    for (p, &a) in ai.iter().enumerate() {
                                        if a != 0.0 {
                                            s[p * n..(p + 1) * n].iter_mut().zip(gi).for_each(|(x, y)| *x += a * y);
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = out.dims2();
                    let d = transpose_values(&g, r, c);
                    acc(*a, &mut |s| s.iter_mut().zip(&d).for_each(|(x, y)| *x += y));
                }
                Op::Concat { inputs, axis } => {
                    let (_, total) = out.dims2();
                    let mut off = 0;
                    for &x in inputs {
                        let t = val(x);
                        let n = t.numel();
                        let (r, cc) = t.dims2();
                        if out.rank() == 1 || *axis == 0 {
                            acc(x, &mut |s| s.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b));
                            off += n;
                        } else {
                            acc(x, &mut |s| {
                                for i in 0..r {
                                    for j in 0..cc {
                                        s[i * cc + j] += g[i * total + off + j];
                                    }
                                }
                            });
                            off += cc;
                        }
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (r, c) = val(*input).dims2();
                    let (_, len) = out.dims2();
                    acc(*input, &mut |s| {
                        if *axis == 0 {
                            s[start * c..start * c + g.len()].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                        } else {
                            for i in 0..r {
                                for j in 0..len {
                                    s[i * c + start + j] += g[i * len + j];
                                }
                            }
                        }
                    })
                }
                Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y)),
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => {
                    let n = val(*a).numel() as f64;
                    acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n))
                }
                Op::Softmax { input, axis } => {
                    let lanes = Lanes::new(out, *axis)?;
                    let y = out.values();
                    acc(*input, &mut |s| {
                        for lane in 0..lanes.count {
                            let s0 = lanes.start(lane);
                            let dot: f64 = (0..lanes.len).map(|i| s0 + i * lanes.stride).map(|k| g[k] * y[k]).sum();
                            for i in 0..lanes.len {
                                let k = s0 + i * lanes.stride;
                                s[k] += y[k] * (g[k] - dot);
                            }
                        }
                    })
                }
                Op::LogSoftmax { input, axis } => {
                    let lanes = Lanes::new(out, *axis)?;
                    let y = out.values();
                    acc(*input, &mut |s| {
                        for lane in 0..lanes.count {
                            let s0 = lanes.start(lane);
                            let gsum: f64 = (0..lanes.len).map(|i| g[s0 + i * lanes.stride]).sum();
                            for i in 0..lanes.len {
                                let k = s0 + i * lanes.stride;
                                s[k] += g[k] - y[k].exp() * gsum;
                            }
                        }
                    })
                }
                Op::Embedding { table, indices } => {
                    let (d, vocab) = val(*table).dims2();
                    let n = indices.len();
                    acc(*table, &mut |s| {
                        for (j, &ix) in indices.iter().enumerate() {
                            for i in 0..d {
                                s[i * vocab + ix] += g[i * n + j];
                            }
                        }
                    })
                }
                Op::Gather { input, flat } => acc(*input, &mut |s| {
                    for (k, &f) in flat.iter().enumerate() {
                        s[f] += g[k];
                    }
                }),
                Op::Select { mask, on_true, on_false } => {
                    acc(*on_true, &mut |s| {
                        for (k, &m) in mask.iter().enumerate() {
                            if m {
                                s[k] += g[k];
                            }
                        }
                    });
                    acc(*on_false, &mut |s| {
                        for (k, &m) in mask.iter().enumerate() {
                            if !m {
                                s[k] += g[k];
                            }
                        }
                    });
                }
                Op::StraightThrough(soft) => acc(*soft, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y)),
                Op::Custom { inputs, backward } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let ds = backward(&ins, out, &g);
                    for (&x, d) in inputs.iter().zip(ds) {
                        acc(x, &mut |s| s.iter_mut().zip(&d).for_each(|(a, b)| *a += b));
                    }
                }
            }
        }

        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n]);
            }
        }
        for (i, g) in leaf_grads {
            if g.iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite(format!("NaN gradient at leaf {i}")));
            }
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Nodes are
//! appended only after their inputs, so creation order is a topological
//! order and `backward` walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, gemm, MatRef};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{shape_str, Tensor};
use crate::scalar::{cst, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddGroup(Var, Var),
    MulGroup(Var, Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        axis: usize,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    Attention {
        qkv: Var,
        groups: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::AddGroup(a, b)
            | Op::MulGroup(a, b) => vec![*a, *b],
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::Scale(x, _)
            | Op::Silu(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::LayerNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MeanRows { x, .. }
            | Op::Attention { qkv: x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    attention_scores: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.index()]
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on, or that do not require gradients, get zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients for every bound parameter, in store order.
    pub fn collect(&self, bound: &Bound) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| self.wrt(v)).collect()
    }

    /// Number of nodes processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            attention_scores: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention score elements materialized so far, summed over heads.
    pub fn attention_score_count(&self) -> usize {
        self.attention_scores
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Places every tensor of `store` on the tape.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Result<Bound> {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, shape_str(sa), shape_str(sb)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, "rank 2", shape_str(s))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s))
    }

    /// `x[r, c] + bias[c]` for `x` of shape [R×C] and `bias` of shape [C].
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2("add_row_bias", x)?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape(
                "add_row_bias",
                format!("[{cols}]"),
                shape_str(self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias(x, bias))
    }

    fn group_dims(&self, op: &'static str, x: Var, g: Var) -> Result<(usize, usize, usize)> {
        let (rows, cols) = self.dims2(op, x)?;
        let (groups, gcols) = self.dims2(op, g)?;
        if gcols != cols || rows % groups != 0 {
            return Err(Error::shape(
                op,
                format!("[{groups}x{cols}] dividing {}", shape_str(self.shape(x))),
                shape_str(self.shape(g)),
            ));
        }
        Ok((groups, rows / groups, cols))
    }

    fn group_apply(&mut self, name: &'static str, x: Var, g: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (_, per, cols) = self.group_dims(name, x, g)?;
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            let grow = &gv[(r / per) * cols..(r / per + 1) * cols];
            for (v, &w) in row.iter_mut().zip(grow) {
                *v = f(*v, w);
            }
        }
        self.push(name, out, op)
    }

    /// Adds row `i` of `g` [G×C] to the i-th contiguous block of rows of `x`.
    pub fn add_group(&mut self, x: Var, g: Var) -> Result<Var> {
        self.group_apply("add_group", x, g, |a, b| a + b, Op::AddGroup(x, g))
    }

    /// Multiplies the i-th contiguous block of rows of `x` by row `i` of `g`.
    pub fn mul_group(&mut self, x: Var, g: Var) -> Result<Var> {
        self.group_apply("mul_group", x, g, |a, b| a * b, Op::MulGroup(x, g))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::silu);
        self.push("silu", out, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let (out, rstd) = kernels::layer_norm_with_stats(self.value(x), axis, eps)?;
        self.push("layer_norm", out, Op::LayerNorm { x, axis, rstd })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let out = Tensor::new(vec![cols, rows], data)?;
        self.push("transpose", out, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&values)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} within {cols}", start + len),
                cols,
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    /// Mean over each contiguous block of `group` rows: [G·group × C] -> [G × C].
    pub fn mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_rows", x)?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "mean_rows",
                format!("row count divisible by {group}"),
                rows,
            ));
        }
        let groups = rows / group;
        let src = self.value(x).data();
        let inv = T::from_usize(group).unwrap().recip();
        let mut data = vec![T::zero(); groups * cols];
        for r in 0..rows {
            let dst = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (d, &s) in dst.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *d += s;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![groups, cols], data)?;
        self.push("mean_rows", out, Op::MeanRows { x, group })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push("mean", out, Op::Mean(x))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let total: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(total / T::from_usize(p.len()).unwrap());
        self.push("mse", out, Op::Mse { pred, target })
    }

    /// Multi-head self-attention restricted to contiguous row groups.
    ///
    /// `qkv` is [G·Z × 3W] holding queries, keys and values side by side.
    /// Rows attend only to rows of the same group; the result is [G·Z × W].
    pub fn grouped_attention(&mut self, qkv: Var, groups: usize, heads: usize) -> Result<Var> {
        let (rows, cols3) = self.dims2("grouped_attention", qkv)?;
        if cols3 % 3 != 0 || groups == 0 || rows % groups != 0 {
            return Err(Error::shape(
                "grouped_attention",
                format!("[G·Z x 3W] with G={groups}"),
                shape_str(self.shape(qkv)),
            ));
        }
        let width = cols3 / 3;
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!("width {width} not divisible by {heads} heads")));
        }
        let z = rows / groups;
        let dh = width / heads;
        let scale = cst::<T>(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * width];
        let mut probs = vec![T::zero(); groups * heads * z * z];
        for g in 0..groups {
            for h in 0..heads {
                let base = g * z * cols3 + h * dh;
                let q = MatRef::at(base, cols3, 1);
                let k = MatRef::at(base + width, cols3, 1);
                let v = MatRef::at(base + 2 * width, cols3, 1);
                let p_off = (g * heads + h) * z * z;
                let scores = &mut probs[p_off..p_off + z * z];
                gemm(z, dh, z, scale, src, q, src, k.t(), T::zero(), scores, MatRef::dense(z));
                kernels::softmax_rows_in_place(scores, z);
                let o = MatRef::at(g * z * width + h * dh, width, 1);
                gemm(
                    z,
                    z,
                    dh,
                    T::one(),
                    scores,
                    MatRef::dense(z),
                    src,
                    v,
                    T::zero(),
                    &mut out,
                    o,
                );
            }
        }
        self.attention_scores += groups * heads * z * z;
        let out = Tensor::new(vec![rows, width], out)?;
        self.push(
            "grouped_attention",
            out,
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "scalar loss", shape_str(self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        MatRef::dense(n),
                        self.value(*b).data(),
                        MatRef::dense(n).t(),
                        T::one(),
                        ga,
                        MatRef::dense(k),
                    );
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        MatRef::dense(k).t(),
                        g,
                        MatRef::dense(n),
                        T::one(),
                        gb,
                        MatRef::dense(n),
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.wants(v) {
                        let acc = accumulate(&mut grads[v.0], g.len());
                        acc.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.wants(v) {
                        let acc = accumulate(&mut grads[v.0], g.len());
                        acc.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let o = self.value(other).data();
                        let acc = accumulate(&mut grads[v.0], g.len());
                        for ((d, &s), &w) in acc.iter_mut().zip(g).zip(o) {
                            *d += s * w;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    acc.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
                }
            }
            Op::AddRowBias(x, bias) => {
                let cols = self.value(*bias).numel();
                if self.wants(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    acc.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(*bias) {
                    let acc = accumulate(&mut grads[bias.0], cols);
                    for row in g.chunks(cols) {
                        acc.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::AddGroup(x, gr) => {
                let (groups, cols) = self.value(*gr).dims2().unwrap();
                let per = g.len() / cols / groups;
                if self.wants(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    acc.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if self.wants(*gr) {
                    let acc = accumulate(&mut grads[gr.0], groups * cols);
                    for (r, row) in g.chunks(cols).enumerate() {
                        let dst = &mut acc[(r / per) * cols..(r / per + 1) * cols];
                        dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MulGroup(x, gr) => {
                let (groups, cols) = self.value(*gr).dims2().unwrap();
                let per = g.len() / cols / groups;
                let xv = self.value(*x).data();
                let gv = self.value(*gr).data();
                if self.wants(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for (r, (drow, grow)) in acc.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let w = &gv[(r / per) * cols..(r / per + 1) * cols];
                        for ((d, &s), &wv) in drow.iter_mut().zip(grow).zip(w) {
                            *d += s * wv;
                        }
                    }
                }
                if self.wants(*gr) {
                    let acc = accumulate(&mut grads[gr.0], groups * cols);
                    for (r, (grow, xrow)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        let dst = &mut acc[(r / per) * cols..(r / per + 1) * cols];
                        for ((d, &s), &xv) in dst.iter_mut().zip(grow).zip(xrow) {
                            *d += s * xv;
                        }
                    }
                }
            }
            Op::Silu(x) | Op::Gelu(x) => {
                if self.wants(*x) {
                    let deriv: fn(T) -> T = match node.op {
                        Op::Silu(_) => kernels::silu_grad,
                        _ => kernels::gelu_grad,
                    };
                    let xv = self.value(*x).data();
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for ((d, &s), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *d += s * deriv(xi);
                    }
                }
            }
            Op::LayerNorm { x, axis, rstd } => {
                if self.wants(*x) {
                    let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis).unwrap();
                    let nf = T::from_usize(n).unwrap();
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let mean_g = (0..n).map(|j| g[idx(j)]).sum::<T>() / nf;
                            let mean_gy = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>() / nf;
                            let r = rstd[o * inner + i];
                            for j in 0..n {
                                acc[idx(j)] += r * (g[idx(j)] - mean_g - y[idx(j)] * mean_gy);
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis).unwrap();
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<T>();
                            for j in 0..n {
                                acc[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    acc.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (rows, cols) = self.value(*x).dims2().unwrap();
                    let acc = accumulate(&mut grads[x.0], rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let acc = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            acc[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        let acc = accumulate(&mut grads[p.0], len);
                        acc.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &v)| *d += v);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (rows, cols) = self.value(*x).dims2().unwrap();
                    let len = node.value.shape()[1];
                    let acc = accumulate(&mut grads[x.0], rows * cols);
                    for r in 0..rows {
                        let dst = &mut acc[r * cols + start..r * cols + start + len];
                        dst.iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::MeanRows { x, group } => {
                if self.wants(*x) {
                    let (rows, cols) = self.value(*x).dims2().unwrap();
                    let inv = T::from_usize(*group).unwrap().recip();
                    let acc = accumulate(&mut grads[x.0], rows * cols);
                    for r in 0..rows {
                        let src = &g[(r / group) * cols..(r / group + 1) * cols];
                        acc[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let s = match node.op {
                        Op::Sum(_) => g[0],
                        _ => g[0] / T::from_usize(len).unwrap(),
                    };
                    let acc = accumulate(&mut grads[x.0], len);
                    acc.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let s = cst::<T>(2.0) * g[0] / T::from_usize(p.len()).unwrap();
                for (v, sign) in [(*pred, T::one()), (*target, -T::one())] {
                    if self.wants(v) {
                        let acc = accumulate(&mut grads[v.0], p.len());
                        for ((d, &a), &b) in acc.iter_mut().zip(p).zip(t) {
                            *d += sign * s * (a - b);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                groups,
                heads,
                probs,
            } => {
                if self.wants(*qkv) {
                    self.attention_backward(*qkv, *groups, *heads, probs, g, grads);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        groups: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let src = self.value(qkv).data();
        let (rows, cols3) = self.value(qkv).dims2().unwrap();
        let width = cols3 / 3;
        let z = rows / groups;
        let dh = width / heads;
        let scale = cst::<T>(1.0 / (dh as f64).sqrt());
        let acc = accumulate(&mut grads[qkv.0], rows * cols3);
        let mut dp = vec![T::zero(); z * z];
        for gi in 0..groups {
            for h in 0..heads {
                let base = gi * z * cols3 + h * dh;
                let q = MatRef::at(base, cols3, 1);
                let k = MatRef::at(base + width, cols3, 1);
                let v = MatRef::at(base + 2 * width, cols3, 1);
                let go = MatRef::at(gi * z * width + h * dh, width, 1);
                let p_off = (gi * heads + h) * z * z;
                let p = &probs[p_off..p_off + z * z];
                // dP = dO · Vᵀ
                gemm(
                    z,
                    dh,
                    z,
                    T::one(),
                    g,
                    go,
                    src,
                    v.t(),
                    T::zero(),
                    &mut dp,
                    MatRef::dense(z),
                );
                // dV += Pᵀ · dO
                gemm(z, z, dh, T::one(), p, MatRef::dense(z).t(), g, go, T::one(), acc, v);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for (drow, prow) in dp.chunks_mut(z).zip(p.chunks(z)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // dQ += dS · K ; dK += dSᵀ · Q
                gemm(z, z, dh, T::one(), &dp, MatRef::dense(z), src, k, T::one(), acc, q);
                gemm(z, z, dh, T::one(), &dp, MatRef::dense(z).t(), src, q, T::one(), acc, k);
            }
        }
    }
}

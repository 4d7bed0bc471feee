//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its forward value. Nodes only reference
//! earlier nodes, so the append order is a topological order and backward
//! simply walks the nodes in reverse, visiting each exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Conv2d { x: Var, kernel: Var, stride: usize, padding: usize, groups: usize },
    Pad2d { x: Var, top: usize, left: usize },
    GlobalAvgPool(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Pad2d { .. } => "pad2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::SoftmaxRows(x)
            | Op::GlobalAvgPool(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pad2d { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-threaded recording of differentiable ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First recorded node whose value contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let v = self.value(x).map(|e| e * k);
        self.push(v, Op::Scale(x, c))
    }

    /// `x[m×n] + bias[n]`, the bias repeated on every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.shape() != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not fit rows of {:?}", b.shape(), [m, n]),
            ));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x[c×h×w] + bias[c]`, one bias per channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("add_channel_bias")?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("bias {:?} does not fit {c} channels", b.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        for (plane, &bv) in out.data_mut().chunks_mut(h * w).zip(b.data()) {
            for o in plane {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias)))
    }

    /// `x · w + b` for `x[m×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.abs());
        self.push(v, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(v, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (v, _) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(kernel), stride, padding, groups)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                groups,
            },
        ))
    }

    /// Zero-pads the spatial extents of `x[c×h×w]`.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("pad2d")?;
        let (ph, pw) = (h + top + bottom, w + left + right);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let s = &src[(ch * h + y) * w..][..w];
                out[(ch * ph + y + top) * pw + left..][..w].copy_from_slice(s);
            }
        }
        let v = Tensor::new(&[c, ph, pw], out)?;
        Ok(self.push(v, Op::Pad2d { x, top, left }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, n) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, k) = self.value(p).dims2("concat_rows")?;
            if k != n {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {n} and {k} differ"),
                ));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, k) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {m} and {r} differ"),
                ));
            }
            widths.push(k);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &k) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * k..(i + 1) * k]);
            }
        }
        let v = Tensor::new(&[m, n], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::dim(
                "slice_cols",
                format!("column range {start}..{end} out of 0..{n}"),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let v = Tensor::new(&[m, end - start], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x))
    }

    /// Inverted dropout with drop probability `p`. With `p == 0` this is
    /// the identity and records nothing.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&e, &m)| e * T::of(m))
            .collect();
        let v = Tensor::new(src.shape(), data)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Intermediate gradients are dropped; only leaves that asked for one
        // keep it.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2("matmul")?;
                let (_, n) = bv.dims2("matmul")?;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?)?;
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|e| -e))?;
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(x, c) => {
                let k = T::of(*c);
                self.accumulate(grads, *x, g.map(|e| e * k))?;
            }
            Op::AddBias(x, b) => {
                let (_, n) = g.dims2("add_bias")?;
                let mut db = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (d, &e) in db.iter_mut().zip(row) {
                        *d = *d + e;
                    }
                }
                self.accumulate(grads, *x, g.clone())?;
                self.accumulate(grads, *b, Tensor::new(&[n], db)?)?;
            }
            Op::AddChannelBias(x, b) => {
                let (c, h, w) = g.dims3("add_channel_bias")?;
                let db = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                self.accumulate(grads, *x, g.clone())?;
                self.accumulate(grads, *b, Tensor::new(&[c], db)?)?;
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), "relu", |e, xv| {
                    if xv > T::zero() { e } else { T::zero() }
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, "sigmoid", |e, y| e * y * (T::one() - y))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(*x), "abs", |e, xv| {
                    if xv > T::zero() {
                        e
                    } else if xv < T::zero() {
                        -e
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::SoftmaxRows(x) => {
                let dx = kernels::softmax_rows_backward(&node.value, g)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let gv = self.value(*gamma);
                let (_, cache) = kernels::layer_norm(self.value(*x), gv, self.value(*beta))?;
                let (dx, dg, db) = kernels::layer_norm_backward(&cache, gv, g)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                groups,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    *groups,
                )?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *kernel, dk)?;
            }
            Op::Pad2d { x, top, left } => {
                let (c, h, w) = self.value(*x).dims3("pad2d")?;
                let (_, ph, pw) = g.dims3("pad2d")?;
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for y in 0..h {
                        dx.extend_from_slice(&g.data()[(ch * ph + y + top) * pw + left..][..w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], dx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).dims3("global_avg_pool")?;
                let inv = T::of(1.0 / (h * w) as f64);
                let dx = Tensor::from_fn(&[c, h, w], |i| g.data()[i / (h * w)] * inv);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, kernels::transpose(g)?)?;
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let (m, _) = self.value(p).dims2("concat_rows")?;
                    self.accumulate(grads, p, g.rows(row, row + m)?)?;
                    row += m;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2("concat_cols")?;
                let mut col = 0;
                for &p in parts {
                    let (_, k) = self.value(p).dims2("concat_cols")?;
                    let mut d = Vec::with_capacity(m * k);
                    for i in 0..m {
                        d.extend_from_slice(&g.data()[i * n + col..i * n + col + k]);
                    }
                    self.accumulate(grads, p, Tensor::new(&[m, k], d)?)?;
                    col += k;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, n) = g.dims2("slice_rows")?;
                let mut dx = Tensor::zeros(self.shape(*x));
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx)?;
            }
            Op::SliceCols { x, start } => {
                let (m, k) = g.dims2("slice_cols")?;
                let (_, n) = self.value(*x).dims2("slice_cols")?;
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    dx.data_mut()[i * n + start..i * n + start + k]
                        .copy_from_slice(&g.data()[i * k..(i + 1) * k]);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let e = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), e))?;
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                let e = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), e))?;
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&e, &m)| e * T::of(m)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data)?)?;
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

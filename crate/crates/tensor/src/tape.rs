//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves copy their values
//! out of [`Tensor`]s; [`Tape::backward`] returns a [`Gradients`] map keyed by
//! the source tensor ids, which callers fold back into their parameters.
//! Nodes whose inputs do not require gradients are never visited on the way
//! back, so frozen sub-graphs cost nothing in the backward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Bcast, MatView};
use crate::tensor::{numel, Tensor, TensorId};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f32 = 1e-5;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf(Option<TensorId>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Permute { input: usize, axes: Vec<usize> },
    Softmax { input: usize, axis: usize },
    Gelu(usize),
    Relu(usize),
    Exp(usize),
    Dropout { input: usize, mask: Vec<f32> },
    LayerNorm { x: usize, gamma: usize, beta: usize, rstd: Vec<f32>, xhat: Vec<f32> },
    BatchNorm { x: usize, gamma: usize, beta: usize, rstd: Vec<f32>, xhat: Vec<f32>, train: bool },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f32> },
    Sum(usize),
    Mean(usize),
    MeanAxis { input: usize, axis: usize },
    L2Normalize { input: usize, norms: Vec<f32> },
    Embedding { table: usize, ids: Vec<usize> },
    Narrow { input: usize, axis: usize, start: usize },
}

struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for the caller to
/// fold into its running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased per-feature variance.
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    Train,
    Eval { running_mean: &'a [f32], running_var: &'a [f32] },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_tensor: HashMap<TensorId, Vec<f32>>,
    by_var: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, tensor: &Tensor) -> Option<&[f32]> {
        self.by_tensor.get(&tensor.id()).map(Vec::as_slice)
    }

    /// Gradient of a leaf node created on the tape.
    pub fn wrt(&self, var: Var) -> Option<&[f32]> {
        self.by_var.get(&var.0).map(Vec::as_slice)
    }

    /// Adds this pass's gradient into `tensor.grad`, if the tensor took part.
    pub fn accumulate_into(&self, tensor: &mut Tensor) -> Result<bool> {
        match self.by_tensor.get(&tensor.id()) {
            Some(g) => {
                tensor.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn len(&self) -> usize {
        self.by_tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tensor.is_empty()
    }
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

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Registers a tensor as a leaf. Gradients flow back to it only when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf(Some(t.id())), t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { shape, expected, actual: data.len() });
        }
        Ok(self.push(data, shape, Op::Leaf(None), false))
    }

    /// A leaf that always tracks gradients, detached from any tensor.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<(Vec<f32>, Vec<usize>)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out = kernels::broadcast_shape(op, sa, sb)?;
        let n = numel(&out);
        let (ma, mb) = (Bcast::new(&out, sa), Bcast::new(&out, sb));
        let value = kernels::zip_broadcast(&self.nodes[a.0].value, &ma, &self.nodes[b.0].value, &mb, n, f);
        Ok((value, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, shape) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, shape, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, shape) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, shape, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, shape) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, shape, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x * c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(value, shape, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x + c).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(value, shape, Op::AddScalar(a.0), rg)
    }

    /// `c - a`, element-wise.
    pub fn rsub_scalar(&mut self, c: f32, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    /// Batched matrix product of the last two axes, with optional transposes.
    ///
    /// Either operand may be 2-D while the other is 3-D; the 2-D one is
    /// shared across the batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(mismatch());
        }
        let geo = MatGeom::new(&sa, &sb, ta, tb).ok_or_else(mismatch)?;
        let mut out = vec![0.0; geo.batch * geo.m * geo.n];
        {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for i in 0..geo.batch {
                gemm_block(&geo, av, geo.a_off(i), bv, geo.b_off(i), &mut out[i * geo.m * geo.n..(i + 1) * geo.m * geo.n]);
            }
        }
        let shape = if sa.len() == 3 || sb.len() == 3 { vec![geo.batch, geo.m, geo.n] } else { vec![geo.m, geo.n] };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, shape, Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · wᵀ (+ bias)` with `w` stored `[out, in]`; `x` may have any leading
    /// axes.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let rows = numel(&xs) / ws[1];
        let flat = if xs.len() == 2 { x } else { self.reshape(x, &[rows, ws[1]])? };
        let mut y = self.matmul_t(flat, w, false, true)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        if xs.len() != 2 {
            let mut out_shape = xs.clone();
            *out_shape.last_mut().unwrap() = ws[0];
            y = self.reshape(y, &out_shape)?;
        }
        Ok(y)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if numel(shape) != n.value.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: n.shape.clone(), rhs: shape.to_vec() });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a.0), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        let mut seen = vec![false; n.shape.len()];
        if axes.len() != n.shape.len() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument(format!("permute: {axes:?} is not a permutation of rank {}", n.shape.len())));
        }
        let (value, shape) = kernels::permute(&n.value, &n.shape, axes);
        let rg = n.requires_grad;
        Ok(self.push(value, shape, Op::Permute { input: a.0, axes: axes.to_vec() }, rg))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        if axis >= n.shape.len() {
            return Err(TensorError::BadAxis { op: "softmax", axis, rank: n.shape.len() });
        }
        let (outer, len, inner) = kernels::split_axis(&n.shape, axis);
        let x = &n.value;
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    y[at(k)] /= sum;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(y, shape, Op::Softmax { input: a.0, axis }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| kernels::gelu(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(value, shape, Op::Gelu(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| x.max(0.0)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(value, shape, Op::Relu(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x.exp()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(value, shape, Op::Exp(a.0), rg)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. Identity when not
    /// training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f32, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = &self.nodes[a.0];
        let mask: Vec<f32> = (0..n.value.len()).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect();
        let value = n.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(value, shape, Op::Dropout { input: a.0, mask }, rg))
    }

    /// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let width = *shape.last().ok_or(TensorError::InvalidArgument("layer_norm on a scalar".into()))?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [width] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: shape, rhs: self.nodes[p.0].shape.clone() });
            }
        }
        let (xv, g, b) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let rows = xv.len() / width;
        let mut y = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f32>() / width as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                y[r * width + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(y, shape, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, rstd, xhat }, rg))
    }

    /// Batch normalization of `[batch, features]` input over the batch axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!("batch_norm expects [batch, features], got {shape:?}")));
        }
        let (rows, c) = (shape[0], shape[1]);
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [c] {
                return Err(TensorError::ShapeMismatch { op: "batch_norm", lhs: shape, rhs: self.nodes[p.0].shape.clone() });
            }
        }
        let (xv, g, b) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let (mean, var_norm, stats, train) = match mode {
            BatchNormMode::Train => {
                if rows < 2 {
                    return Err(TensorError::DegenerateBatch(rows));
                }
                let mut mean = vec![0.0f32; c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += xv[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f32);
                let mut ss = vec![0.0f32; c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = xv[r * c + j] - mean[j];
                        ss[j] += d * d;
                    }
                }
                let biased: Vec<f32> = ss.iter().map(|s| s / rows as f32).collect();
                let unbiased: Vec<f32> = ss.iter().map(|s| s / (rows - 1) as f32).collect();
                (mean.clone(), biased, Some(BatchStats { mean, var: unbiased }), true)
            }
            BatchNormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(TensorError::InvalidArgument("batch_norm running statistics have the wrong width".into()));
                }
                (running_mean.to_vec(), running_var.to_vec(), None, false)
            }
        };
        let rstd: Vec<f32> = var_norm.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut y = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (xv[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                y[r * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let v = self.push(y, shape, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, rstd, xhat, train }, rg);
        Ok((v, stats))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = &self.nodes[logits.0];
        if n.shape.len() != 2 || n.shape[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: logits {:?} vs {} labels",
                n.shape,
                labels.len()
            )));
        }
        let k = n.shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument(format!("cross_entropy: label {bad} >= {k} classes")));
        }
        let mut probs = vec![0.0; n.value.len()];
        let mut loss = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &n.value[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += (lse - row[label]) as f64;
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let value = vec![(loss / labels.len() as f64) as f32];
        let rg = n.requires_grad;
        Ok(self.push(value, vec![1], Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().map(|&x| x as f64).sum::<f64>() as f32;
        let rg = n.requires_grad;
        self.push(vec![s], vec![1], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = (n.value.iter().map(|&x| x as f64).sum::<f64>() / n.value.len() as f64) as f32;
        let rg = n.requires_grad;
        self.push(vec![s], vec![1], Op::Mean(a.0), rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        if axis >= n.shape.len() {
            return Err(TensorError::BadAxis { op: "mean_axis", axis, rank: n.shape.len() });
        }
        let (outer, len, inner) = kernels::split_axis(&n.shape, axis);
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &n.value[(o * len + k) * inner..(o * len + k + 1) * inner];
                y[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f32;
        y.iter_mut().for_each(|v| *v *= inv);
        let mut shape = n.shape.clone();
        shape.remove(axis);
        let rg = n.requires_grad;
        Ok(self.push(y, shape, Op::MeanAxis { input: a.0, axis }, rg))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let width = *n.shape.last().ok_or(TensorError::InvalidArgument("l2_normalize on a scalar".into()))?;
        let rows = n.value.len() / width;
        let mut norms = vec![0.0; rows];
        let mut y = vec![0.0; n.value.len()];
        for r in 0..rows {
            let row = &n.value[r * width..(r + 1) * width];
            let norm = (row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32).max(1e-12);
            norms[r] = norm;
            y[r * width..(r + 1) * width].iter_mut().zip(row).for_each(|(d, s)| *d = s / norm);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(y, shape, Op::L2Normalize { input: a.0, norms }, rg))
    }

    /// Row gather from a `[vocab, width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let n = &self.nodes[table.0];
        if n.shape.len() != 2 {
            return Err(TensorError::InvalidArgument(format!("embedding table must be 2-D, got {:?}", n.shape)));
        }
        let (vocab, width) = (n.shape[0], n.shape[1]);
        let mut y = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidArgument(format!("token id {id} outside vocabulary of {vocab}")));
            }
            y.extend_from_slice(&n.value[id * width..(id + 1) * width]);
        }
        let rg = n.requires_grad;
        Ok(self.push(y, vec![ids.len(), width], Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = &self.nodes[a.0];
        if axis >= n.shape.len() {
            return Err(TensorError::BadAxis { op: "narrow", axis, rank: n.shape.len() });
        }
        if start + len > n.shape[axis] {
            return Err(TensorError::InvalidArgument(format!("narrow: {start}+{len} exceeds axis size {}", n.shape[axis])));
        }
        let (outer, full, inner) = kernels::split_axis(&n.shape, axis);
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&n.value[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let rg = n.requires_grad;
        Ok(self.push(y, shape, Op::Narrow { input: a.0, axis, start }, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(source) = node.op {
                if let Some(id) = source {
                    match out.by_tensor.get_mut(&id) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            out.by_tensor.insert(id, g.clone());
                        }
                    }
                }
                out.by_var.insert(i, g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Returns the accumulator of input `p`, or None if it needs no gradient.
        macro_rules! acc {
            ($p:expr) => {{
                let p = $p;
                if nodes[p].requires_grad {
                    Some(grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf(_) => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                let ma = Bcast::new(&node.shape, &nodes[a].shape);
                let mb = Bcast::new(&node.shape, &nodes[b].shape);
                if let Some(ga) = acc!(a) {
                    kernels::reduce_into(ga, &ma, g.iter().copied());
                }
                if let Some(gb) = acc!(b) {
                    kernels::reduce_into(gb, &mb, g.iter().map(|v| sign * v));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ma = Bcast::new(&node.shape, &nodes[a].shape);
                let mb = Bcast::new(&node.shape, &nodes[b].shape);
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if nodes[a].requires_grad {
                    let contrib: Vec<f32> = g.iter().enumerate().map(|(k, v)| v * bv[mb.at(k)]).collect();
                    kernels::reduce_into(acc!(a).unwrap(), &ma, contrib.into_iter());
                }
                if nodes[b].requires_grad {
                    let contrib: Vec<f32> = g.iter().enumerate().map(|(k, v)| v * av[ma.at(k)]).collect();
                    kernels::reduce_into(acc!(b).unwrap(), &mb, contrib.into_iter());
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Permute { input, axes } => {
                if let Some(ga) = acc!(*input) {
                    let mut inverse = vec![0; axes.len()];
                    for (k, &ax) in axes.iter().enumerate() {
                        inverse[ax] = k;
                    }
                    let (back, _) = kernels::permute(g, &node.shape, &inverse);
                    ga.iter_mut().zip(back).for_each(|(d, v)| *d += v);
                }
            }
            Op::Softmax { input, axis } => {
                if let Some(ga) = acc!(*input) {
                    let y = &node.value;
                    let (outer, len, inner) = kernels::split_axis(&node.shape, *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + j;
                            let dot: f32 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                ga[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = &nodes[*a].value;
                if let Some(ga) = acc!(*a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * kernels::gelu_grad(x[k]);
                    }
                }
            }
            Op::Relu(a) => {
                let x = &nodes[*a].value;
                if let Some(ga) = acc!(*a) {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).zip(&node.value).for_each(|((d, v), y)| *d += v * y);
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = acc!(*input) {
                    ga.iter_mut().zip(g).zip(mask).for_each(|((d, v), m)| *d += v * m);
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd, xhat } => {
                let width = *node.shape.last().unwrap();
                let rows = g.len() / width;
                let gv = &nodes[*gamma].value;
                if let Some(gg) = acc!(*gamma) {
                    for r in 0..rows {
                        for j in 0..width {
                            gg[j] += g[r * width + j] * xhat[r * width + j];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for r in 0..rows {
                        for j in 0..width {
                            gb[j] += g[r * width + j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0f32, 0.0f32);
                        for j in 0..width {
                            let d = g[r * width + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat[r * width + j];
                        }
                        m1 /= width as f32;
                        m2 /= width as f32;
                        for j in 0..width {
                            let d = g[r * width + j] * gv[j];
                            gx[r * width + j] += rstd[r] * (d - m1 - xhat[r * width + j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, rstd, xhat, train } => {
                let (rows, c) = (node.shape[0], node.shape[1]);
                let gv = &nodes[*gamma].value;
                if let Some(gg) = acc!(*gamma) {
                    for k in 0..g.len() {
                        gg[k % c] += g[k] * xhat[k];
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for k in 0..g.len() {
                        gb[k % c] += g[k];
                    }
                }
                if let Some(gx) = acc!(*x) {
                    if *train {
                        let mut m1 = vec![0.0f32; c];
                        let mut m2 = vec![0.0f32; c];
                        for k in 0..g.len() {
                            let d = g[k] * gv[k % c];
                            m1[k % c] += d;
                            m2[k % c] += d * xhat[k];
                        }
                        for j in 0..c {
                            m1[j] /= rows as f32;
                            m2[j] /= rows as f32;
                        }
                        for k in 0..g.len() {
                            let j = k % c;
                            gx[k] += rstd[j] * (g[k] * gv[j] - m1[j] - xhat[k] * m2[j]);
                        }
                    } else {
                        for k in 0..g.len() {
                            gx[k] += g[k] * gv[k % c] * rstd[k % c];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(gl) = acc!(*logits) {
                    let k = nodes[*logits].shape[1];
                    let scale = g[0] / labels.len() as f32;
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = acc!(*a) {
                    let v = g[0] / ga.len() as f32;
                    ga.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::MeanAxis { input, axis } => {
                if let Some(ga) = acc!(*input) {
                    let (outer, len, inner) = kernels::split_axis(&nodes[*input].shape, *axis);
                    let inv = 1.0 / len as f32;
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut ga[(o * len + k) * inner..(o * len + k + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                if let Some(ga) = acc!(*input) {
                    let width = *node.shape.last().unwrap();
                    let y = &node.value;
                    for (r, norm) in norms.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let dot: f32 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                        for k in span {
                            ga[k] += (g[k] - y[k] * dot) / norm;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = acc!(*table) {
                    let width = node.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                if let Some(ga) = acc!(*input) {
                    let (outer, full, inner) = kernels::split_axis(&nodes[*input].shape, *axis);
                    let len = node.shape[*axis];
                    for o in 0..outer {
                        let dst = &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                        dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: usize, b: usize, ta: bool, tb: bool, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let geo = MatGeom::new(&na.shape, &nb.shape, ta, tb).expect("validated in forward");
        let gv = MatView::stored(geo.m, geo.n, false);
        let a_logical = MatView::stored(geo.a_rows, geo.a_cols, geo.ta);
        let b_logical = MatView::stored(geo.b_rows, geo.b_cols, geo.tb);
        if na.requires_grad {
            let ga = grads[a].get_or_insert_with(|| vec![0.0; na.value.len()]);
            for i in 0..geo.batch {
                let go = &g[i * geo.m * geo.n..(i + 1) * geo.m * geo.n];
                let off = geo.a_off(i);
                let block = &mut ga[off..off + geo.a_rows * geo.a_cols];
                // d op(A) = dC · op(B)ᵀ, written through op(A)'s strides.
                kernels::gemm(go, gv, &nb.value[geo.b_off(i)..], b_logical.t(), 1.0, block, a_logical);
            }
        }
        if nb.requires_grad {
            let gb = grads[b].get_or_insert_with(|| vec![0.0; nb.value.len()]);
            for i in 0..geo.batch {
                let go = &g[i * geo.m * geo.n..(i + 1) * geo.m * geo.n];
                let off = geo.b_off(i);
                let block = &mut gb[off..off + geo.b_rows * geo.b_cols];
                // d op(B) = op(A)ᵀ · dC.
                kernels::gemm(&na.value[geo.a_off(i)..], a_logical.t(), go, gv, 1.0, block, b_logical);
            }
        }
    }
}

/// Geometry of a (possibly batched) matmul.
struct MatGeom {
    batch: usize,
    m: usize,
    n: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    a_batched: bool,
    b_batched: bool,
    ta: bool,
    tb: bool,
}

impl MatGeom {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<Self> {
        let (a_rows, a_cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (b_rows, b_cols) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
        let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if ka != kb {
            return None;
        }
        let (a_batched, b_batched) = (sa.len() == 3, sb.len() == 3);
        let batch = match (a_batched, b_batched) {
            (true, true) if sa[0] == sb[0] => sa[0],
            (true, true) => return None,
            (true, false) => sa[0],
            (false, true) => sb[0],
            (false, false) => 1,
        };
        Some(MatGeom { batch, m, n, a_rows, a_cols, b_rows, b_cols, a_batched, b_batched, ta, tb })
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.a_rows * self.a_cols
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.b_rows * self.b_cols
        } else {
            0
        }
    }
}

fn gemm_block(geo: &MatGeom, a: &[f32], a_off: usize, b: &[f32], b_off: usize, out: &mut [f32]) {
    kernels::gemm(
        &a[a_off..],
        MatView::stored(geo.a_rows, geo.a_cols, geo.ta),
        &b[b_off..],
        MatView::stored(geo.b_rows, geo.b_cols, geo.tb),
        0.0,
        out,
        MatView::stored(geo.m, geo.n, false),
    );
}

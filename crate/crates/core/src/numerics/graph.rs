//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the nodes in reverse creation
//! order and accumulates vector-Jacobian products into per-node gradient
//! buffers. Nodes that cannot reach a parameter or a marked input are never
//! visited on the way back.
//!
//! Operations are deliberately coarse (fused linear layers, fused multi-scale
//! bilinear sampling, fused BCE-with-logits) so that per-node bookkeeping is
//! negligible next to the arithmetic.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of one pyramid level as seen by the sampling operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, inp: usize, out: usize },
    HeadLinear { x: Var, w: Var, heads: usize, n: usize, inp: usize, out: usize },
    Relu(Var),
    Sigmoid(Var),
    InvSigmoid { x: Var, eps: f64 },
    ShiftedSigmoid { u: Var, r: Var, eps: f64 },
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax { x: Var, outer: usize, axis: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    ConcatRows(Vec<Var>),
    Gather { x: Var, indices: Vec<usize> },
    BilinearSample { level: Var, coords: Var, dims: LevelDims, channels: usize },
    DeformSample(Box<DeformSampleOp>),
    BceLogits { x: Var, targets: Vec<f64>, weights: Vec<f64> },
}

/// Names of every differentiable operation the tape records, in the order
/// of [`Op`].
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_broadcast",
    "scale",
    "offset",
    "matmul",
    "linear",
    "head_linear",
    "relu",
    "sigmoid",
    "inverse_sigmoid",
    "shifted_sigmoid",
    "exp",
    "ln",
    "abs",
    "sqrt",
    "minimum",
    "maximum",
    "softmax",
    "layer_norm",
    "sum",
    "reshape",
    "transpose",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "gather",
    "bilinear_sample",
    "deform_sample",
    "bce_with_logits",
];

impl Op {
    fn name(&self) -> Option<&'static str> {
        let i = match self {
            Op::Leaf => return None,
            Op::Add(..) => 0,
            Op::Sub(..) => 1,
            Op::Mul(..) => 2,
            Op::Div(..) => 3,
            Op::AddBroadcast(..) => 4,
            Op::Scale(..) => 5,
            Op::Offset(..) => 6,
            Op::MatMul { .. } => 7,
            Op::Linear { .. } => 8,
            Op::HeadLinear { .. } => 9,
            Op::Relu(..) => 10,
            Op::Sigmoid(..) => 11,
            Op::InvSigmoid { .. } => 12,
            Op::ShiftedSigmoid { .. } => 13,
            Op::Exp(..) => 14,
            Op::Log(..) => 15,
            Op::Abs(..) => 16,
            Op::Sqrt(..) => 17,
            Op::Minimum(..) => 18,
            Op::Maximum(..) => 19,
            Op::Softmax { .. } => 20,
            Op::LayerNorm { .. } => 21,
            Op::Sum(..) => 22,
            Op::Reshape(..) => 23,
            Op::Transpose { .. } => 24,
            Op::SliceCols { .. } => 25,
            Op::ConcatCols { .. } => 26,
            Op::ConcatRows(..) => 27,
            Op::Gather { .. } => 28,
            Op::BilinearSample { .. } => 29,
            Op::DeformSample(..) => 30,
            Op::BceLogits { .. } => 31,
        };
        Some(OP_NAMES[i])
    }
}

#[derive(Clone, Debug)]
struct DeformSampleOp {
    levels: Vec<Var>,
    dims: Vec<LevelDims>,
    refs: Var,
    offsets: Var,
    weights: Var,
    queries: usize,
    heads: usize,
    points: usize,
    channels: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter used in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Adds every parameter gradient into `acc` (indexed by parameter id).
    pub fn accumulate_into(&self, acc: &mut [Vec<f64>], scale: f64) {
        let mut ids: Vec<_> = self.param_vars.keys().copied().collect();
        ids.sort();
        for id in ids {
            if let Some(g) = self.param(id) {
                for (a, &v) in acc[id.index()].iter_mut().zip(g) {
                    *a += scale * v;
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without a parameter store; only constants and inputs.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Distinct operation names recorded so far, sorted.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut names: Vec<_> = self.nodes.iter().filter_map(|n| n.op.name()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a parameter of the attached store, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store attached");
        let p = store.get(id);
        let mut t = p.tensor.clone();
        t.clear_grad();
        let v = self.push(t, Op::Leaf, p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", f64::max, Op::Maximum(a, b))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Argument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `a + b` where `b` is repeated along the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na % nb != 0 {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} onto {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bd = self.data(b);
        let data: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn inverse_sigmoid(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |y| kernels::inverse_sigmoid(y, eps), Op::InvSigmoid { x: a, eps })
    }

    /// `sigmoid(u + inverse_sigmoid(r, eps))` elementwise; exact at `u = 0`.
    pub fn shifted_sigmoid(&mut self, u: Var, r: Var, eps: f64) -> Result<Var> {
        self.binary(
            u,
            r,
            "shifted_sigmoid",
            |a, b| kernels::shifted_sigmoid(a, b, eps),
            Op::ShiftedSigmoid { u, r, eps },
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn matrix_dims(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(vec![cols, rows], out), Op::Transpose { x: a, rows, cols }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, m) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul { a, b, n, k, m }, ng))
    }

    /// `x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.value(x).as_matrix_dims();
        let (out, win) = self.matrix_dims(w, "linear weight")?;
        if inp != win {
            return Err(Error::Dimension(format!(
                "linear: input has {inp} features, weight expects {win}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(Error::Dimension(format!(
                    "linear: bias of length {} for {out} outputs",
                    self.value(b).len()
                )));
            }
        }
        let mut data = vec![0.0; n * out];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in data.chunks_exact_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        kernels::matmul_bt_acc(self.data(x), self.data(w), &mut data, n, inp, out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Linear { x, w, b, n, inp, out }, ng))
    }

    /// Per-head projection: `x: [n, heads*in]`, `w: [heads*out, in]`; head `m`
    /// maps input columns `m*in..` through weight rows `m*out..`.
    pub fn head_linear(&mut self, x: Var, w: Var, heads: usize) -> Result<Var> {
        let (n, cols) = self.matrix_dims(x, "head_linear input")?;
        let (wrows, inp) = self.matrix_dims(w, "head_linear weight")?;
        if heads == 0 || cols != heads * inp || wrows % heads != 0 {
            return Err(Error::Dimension(format!(
                "head_linear: input {n}x{cols}, weight {wrows}x{inp}, {heads} heads"
            )));
        }
        let out = wrows / heads;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut data = vec![0.0; n * heads * out];
        for i in 0..n {
            for m in 0..heads {
                let xr = &xd[i * cols + m * inp..i * cols + (m + 1) * inp];
                for o in 0..out {
                    let wr = &wd[(m * out + o) * inp..(m * out + o + 1) * inp];
                    data[i * heads * out + m * out + o] = kernels::dot(xr, wr);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::from_parts(vec![n, heads * out], data),
            Op::HeadLinear { x, w, heads, n, inp, out },
            ng,
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Argument(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.data(x).to_vec();
        kernels::softmax_strided(&mut data, outer, len, inner);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Softmax { x, outer, axis: len, inner },
            ng,
        ))
    }

    /// Normalizes each row of `x` over its last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Dimension(format!("layer_norm over {cols} features")));
        }
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, rows, cols, xhat, inv_std },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if start + len > cols || len == 0 {
            return Err(Error::Dimension(format!("slice {start}..{} of {cols} columns", start + len)));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols { x, rows, cols, start, len },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self
            .value(*parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?)
            .as_matrix_dims()
            .0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols { parts: widths, rows },
            ng,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let cols = self.value(first).as_matrix_dims().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if c != cols {
                return Err(Error::Dimension(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix_dims();
        if start + len > rows || len == 0 {
            return Err(Error::Dimension(format!("row slice {start}..{} of {rows}", start + len)));
        }
        let indices: Vec<usize> = (start * cols..(start + len) * cols).collect();
        self.gather(x, indices, &[len, cols])
    }

    /// `out.flat[i] = x.flat[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if indices.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Dimension("gather indices out of range or shape mismatch".into()));
        }
        let xd = self.data(x);
        let data: Vec<f64> = indices.iter().map(|&i| xd[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x, indices }, ng))
    }

    /// Bilinear sampling of a channels-last level `[h*w, c]` at continuous
    /// pixel coordinates `coords: [p, 2]` (x, y); out-of-range pixels read as zero.
    pub fn bilinear_sample(&mut self, level: Var, dims: LevelDims, coords: Var) -> Result<Var> {
        let (hw, channels) = self.value(level).as_matrix_dims();
        if hw != dims.height * dims.width {
            return Err(Error::Dimension(format!(
                "level has {hw} pixels, dims say {}x{}",
                dims.height, dims.width
            )));
        }
        let (p, two) = self.value(coords).as_matrix_dims();
        if two != 2 {
            return Err(Error::Dimension("coordinates must be [p, 2]".into()));
        }
        let ld = self.data(level);
        let cd = self.data(coords);
        let mut out = vec![0.0; p * channels];
        for i in 0..p {
            let corners = kernels::bilinear_corners(cd[2 * i], cd[2 * i + 1], dims.height, dims.width);
            let orow = &mut out[i * channels..(i + 1) * channels];
            for c in corners.iter().flatten() {
                kernels::axpy(c.weight, &ld[c.index * channels..(c.index + 1) * channels], orow);
            }
        }
        let ng = self.ng(level) || self.ng(coords);
        Ok(self.push(
            Tensor::from_parts(vec![p, channels], out),
            Op::BilinearSample { level, coords, dims, channels },
            ng,
        ))
    }

    /// Fused multi-scale deformable sampling.
    ///
    /// `levels[l]` is channels-last `[h_l*w_l, c]`; `refs: [q, 2]` are
    /// normalized reference points; `offsets: [q, heads*L*points*2]` are
    /// pixel displacements at each level; `weights: [q, heads*L*points]`.
    /// Output `[q, heads*c]` holds, for each head, the attention-weighted sum
    /// of bilinear samples at `ref * (w_l, h_l) - 0.5 + offset`.
    pub fn deform_sample(
        &mut self,
        levels: &[Var],
        dims: &[LevelDims],
        refs: Var,
        offsets: Var,
        weights: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let nl = levels.len();
        if nl == 0 || nl != dims.len() {
            return Err(Error::Dimension("deform_sample needs one dims entry per level".into()));
        }
        let channels = self.value(levels[0]).as_matrix_dims().1;
        for (&lv, d) in levels.iter().zip(dims) {
            let (hw, c) = self.value(lv).as_matrix_dims();
            if hw != d.height * d.width || c != channels {
                return Err(Error::Dimension("deform_sample level shape mismatch".into()));
            }
        }
        let (q, two) = self.value(refs).as_matrix_dims();
        let per = heads * nl * points;
        if two != 2
            || self.value(offsets).len() != q * per * 2
            || self.value(weights).len() != q * per
        {
            return Err(Error::Dimension(format!(
                "deform_sample: refs {:?}, offsets {:?}, weights {:?} for {heads} heads, {nl} levels, {points} points",
                self.shape(refs),
                self.shape(offsets),
                self.shape(weights)
            )));
        }
        let rd = self.data(refs);
        let od = self.data(offsets);
        let wd = self.data(weights);
        let mut out = vec![0.0; q * heads * channels];
        for qi in 0..q {
            let (rx, ry) = (rd[2 * qi], rd[2 * qi + 1]);
            for m in 0..heads {
                let orow = &mut out[(qi * heads + m) * channels..(qi * heads + m + 1) * channels];
                for (l, d) in dims.iter().enumerate() {
                    let ld = self.nodes[levels[l].0].value.data();
                    for k in 0..points {
                        let s = qi * per + (m * nl + l) * points + k;
                        let a = wd[s];
                        let px = rx * d.width as f64 - 0.5 + od[2 * s];
                        let py = ry * d.height as f64 - 0.5 + od[2 * s + 1];
                        for c in kernels::bilinear_corners(px, py, d.height, d.width).iter().flatten() {
                            kernels::axpy(a * c.weight, &ld[c.index * channels..(c.index + 1) * channels], orow);
                        }
                    }
                }
            }
        }
        let ng = levels.iter().any(|&v| self.ng(v)) || self.ng(refs) || self.ng(offsets) || self.ng(weights);
        Ok(self.push(
            Tensor::from_parts(vec![q, heads * channels], out),
            Op::DeformSample(Box::new(DeformSampleOp {
                levels: levels.to_vec(),
                dims: dims.to_vec(),
                refs,
                offsets,
                weights,
                queries: q,
                heads,
                points,
                channels,
            })),
            ng,
        ))
    }

    /// `Σ weights_i · BCE(targets_i, sigmoid(x_i))`, computed from logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::Dimension(format!(
                "bce: {n} logits, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let loss: f64 = self
            .data(x)
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &t), &w)| w * kernels::bce_logit(z, t))
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { x, targets, weights }, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(b) = self.buf(grads, v) {
            for (i, x) in b.iter_mut().enumerate() {
                *x += f(i);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc_map(grads, a, |i| g[i]);
                self.acc_map(grads, b, |i| g[i]);
            }
            &Op::Sub(a, b) => {
                self.acc_map(grads, a, |i| g[i]);
                self.acc_map(grads, b, |i| -g[i]);
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc_map(grads, a, |i| g[i] * bd[i]);
                self.acc_map(grads, b, |i| g[i] * ad[i]);
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc_map(grads, a, |i| g[i] / bd[i]);
                self.acc_map(grads, b, |i| -g[i] * ad[i] / (bd[i] * bd[i]));
            }
            &Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc_map(grads, a, |i| if ad[i] <= bd[i] { g[i] } else { 0.0 });
                self.acc_map(grads, b, |i| if ad[i] <= bd[i] { 0.0 } else { g[i] });
            }
            &Op::Maximum(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc_map(grads, a, |i| if ad[i] >= bd[i] { g[i] } else { 0.0 });
                self.acc_map(grads, b, |i| if ad[i] >= bd[i] { 0.0 } else { g[i] });
            }
            &Op::AddBroadcast(a, b) => {
                self.acc_map(grads, a, |i| g[i]);
                if let Some(bb) = self.buf(grads, b) {
                    let nb = bb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        bb[i % nb] += gi;
                    }
                }
            }
            &Op::Scale(a, s) => self.acc_map(grads, a, |i| g[i] * s),
            &Op::Offset(a) | &Op::Reshape(a) => self.acc_map(grads, a, |i| g[i]),
            &Op::Sum(a) => self.acc_map(grads, a, |_| g[0]),
            &Op::Relu(a) => self.acc_map(grads, a, |i| if y[i] > 0.0 { g[i] } else { 0.0 }),
            &Op::Sigmoid(a) => self.acc_map(grads, a, |i| g[i] * y[i] * (1.0 - y[i])),
            &Op::InvSigmoid { x, eps } => {
                let xd = self.data(x);
                self.acc_map(grads, x, |i| {
                    let v = xd[i];
                    if v < eps || v > 1.0 - eps {
                        0.0
                    } else {
                        g[i] / (v * (1.0 - v))
                    }
                });
            }
            &Op::ShiftedSigmoid { u, r, eps } => {
                let rd = self.data(r);
                self.acc_map(grads, u, |i| g[i] * y[i] * (1.0 - y[i]));
                self.acc_map(grads, r, |i| {
                    let v = rd[i];
                    if v < eps || v > 1.0 - eps {
                        0.0
                    } else {
                        g[i] * y[i] * (1.0 - y[i]) / (v * (1.0 - v))
                    }
                });
            }
            &Op::Exp(a) => self.acc_map(grads, a, |i| g[i] * y[i]),
            &Op::Log(a) => {
                let ad = self.data(a);
                self.acc_map(grads, a, |i| g[i] / ad[i]);
            }
            &Op::Abs(a) => {
                let ad = self.data(a);
                self.acc_map(grads, a, |i| g[i] * sign(ad[i]));
            }
            &Op::Sqrt(a) => self.acc_map(grads, a, |i| g[i] * 0.5 / y[i]),
            &Op::MatMul { a, b, n, k, m } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = self.buf(grads, a) {
                    // ga[n,k] += g[n,m] · bᵀ
                    kernels::matmul_bt_acc(g, bd, ga, n, m, k);
                }
                if let Some(gb) = self.buf(grads, b) {
                    // gb[k,m] += aᵀ · g
                    kernels::matmul_at_acc(ad, g, gb, n, k, m);
                }
            }
            &Op::Linear { x, w, b, n, inp, out } => {
                let (xd, wd) = (self.data(x), self.data(w));
                if let Some(gx) = self.buf(grads, x) {
                    kernels::matmul_acc(g, wd, gx, n, out, inp);
                }
                if let Some(gw) = self.buf(grads, w) {
                    kernels::matmul_at_acc(g, xd, gw, n, out, inp);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.buf(grads, b) {
                        for row in g.chunks_exact(out) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            &Op::HeadLinear { x, w, heads, n, inp, out } => {
                let (xd, wd) = (self.data(x), self.data(w));
                let cols = heads * inp;
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..n {
                        for m in 0..heads {
                            let gxr = &mut gx[i * cols + m * inp..i * cols + (m + 1) * inp];
                            for o in 0..out {
                                let go = g[i * heads * out + m * out + o];
                                kernels::axpy(go, &wd[(m * out + o) * inp..(m * out + o + 1) * inp], gxr);
                            }
                        }
                    }
                }
                if let Some(gw) = self.buf(grads, w) {
                    for i in 0..n {
                        for m in 0..heads {
                            let xr = &xd[i * cols + m * inp..i * cols + (m + 1) * inp];
                            for o in 0..out {
                                let go = g[i * heads * out + m * out + o];
                                kernels::axpy(go, xr, &mut gw[(m * out + o) * inp..(m * out + o + 1) * inp]);
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, axis, inner } => {
                if let Some(gx) = self.buf(grads, x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * axis * inner + j;
                            let dot: f64 = (0..axis).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                            for t in 0..axis {
                                let i = base + t * inner;
                                gx[i] += y[i] * (g[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rows, cols, xhat, inv_std } => {
                let (rows, cols) = (*rows, *cols);
                let gam = self.data(*gamma);
                if let Some(gg) = self.buf(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let nf = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[off + c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat[off + c];
                        }
                        for c in 0..cols {
                            let d = g[off + c] * gam[c];
                            gx[off + c] += inv_std[r] * (d - sum_d / nf - xhat[off + c] * sum_dx / nf);
                        }
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            &Op::SliceCols { x, rows, cols, start, len } => {
                if let Some(gx) = self.buf(grads, x) {
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut start = 0;
                for &(p, c) in parts {
                    if let Some(gp) = self.buf(grads, p) {
                        for r in 0..*rows {
                            for j in 0..c {
                                gp[r * c + j] += g[r * total + start + j];
                            }
                        }
                    }
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.buf(grads, p) {
                        for (a, &v) in gp.iter_mut().zip(&g[start..start + n]) {
                            *a += v;
                        }
                    }
                    start += n;
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for (&i, &v) in indices.iter().zip(g) {
                        gx[i] += v;
                    }
                }
            }
            &Op::BilinearSample { level, coords, dims, channels } => {
                let ld = self.data(level);
                let cd = self.data(coords);
                let p = cd.len() / 2;
                let mut gc = vec![0.0; p * 2];
                let mut gl = self.nodes[level.0].needs_grad.then(|| vec![0.0; ld.len()]);
                for i in 0..p {
                    let gr = &g[i * channels..(i + 1) * channels];
                    for c in kernels::bilinear_corners(cd[2 * i], cd[2 * i + 1], dims.height, dims.width)
                        .iter()
                        .flatten()
                    {
                        let v = &ld[c.index * channels..(c.index + 1) * channels];
                        let gv = kernels::dot(gr, v);
                        gc[2 * i] += c.dx * gv;
                        gc[2 * i + 1] += c.dy * gv;
                        if let Some(gl) = gl.as_mut() {
                            kernels::axpy(c.weight, gr, &mut gl[c.index * channels..(c.index + 1) * channels]);
                        }
                    }
                }
                if let Some(gl) = gl {
                    self.acc_map(grads, level, |i| gl[i]);
                }
                self.acc_map(grads, coords, |i| gc[i]);
            }
            Op::DeformSample(op) => self.deform_sample_backward(op, g, grads),
            Op::BceLogits { x, targets, weights } => {
                let xd = self.data(*x);
                self.acc_map(grads, *x, |i| g[0] * weights[i] * (kernels::sigmoid(xd[i]) - targets[i]));
            }
        }
    }

    fn deform_sample_backward(&self, op: &DeformSampleOp, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nl = op.levels.len();
        let per = op.heads * nl * op.points;
        let ch = op.channels;
        let rd = self.data(op.refs);
        let od = self.data(op.offsets);
        let wd = self.data(op.weights);
        let mut g_ref = vec![0.0; op.queries * 2];
        let mut g_off = vec![0.0; op.queries * per * 2];
        let mut g_w = vec![0.0; op.queries * per];
        let mut g_lv: Vec<Option<Vec<f64>>> = op
            .levels
            .iter()
            .map(|&v| self.nodes[v.0].needs_grad.then(|| vec![0.0; self.value(v).len()]))
            .collect();
        for qi in 0..op.queries {
            let (rx, ry) = (rd[2 * qi], rd[2 * qi + 1]);
            for m in 0..op.heads {
                let gr = &g[(qi * op.heads + m) * ch..(qi * op.heads + m + 1) * ch];
                for (l, d) in op.dims.iter().enumerate() {
                    let ld = self.data(op.levels[l]);
                    for k in 0..op.points {
                        let s = qi * per + (m * nl + l) * op.points + k;
                        let a = wd[s];
                        let px = rx * d.width as f64 - 0.5 + od[2 * s];
                        let py = ry * d.height as f64 - 0.5 + od[2 * s + 1];
                        let (mut gx, mut gy, mut gw) = (0.0, 0.0, 0.0);
                        for c in kernels::bilinear_corners(px, py, d.height, d.width).iter().flatten() {
                            let v = &ld[c.index * ch..(c.index + 1) * ch];
                            let gv = kernels::dot(gr, v);
                            gw += c.weight * gv;
                            gx += c.dx * gv;
                            gy += c.dy * gv;
                            if let Some(gl) = g_lv[l].as_mut() {
                                kernels::axpy(a * c.weight, gr, &mut gl[c.index * ch..(c.index + 1) * ch]);
                            }
                        }
                        g_w[s] += gw;
                        g_off[2 * s] += a * gx;
                        g_off[2 * s + 1] += a * gy;
                        g_ref[2 * qi] += a * gx * d.width as f64;
                        g_ref[2 * qi + 1] += a * gy * d.height as f64;
                    }
                }
            }
        }
        for (l, gl) in g_lv.into_iter().enumerate() {
            if let Some(gl) = gl {
                self.acc_map(grads, op.levels[l], |i| gl[i]);
            }
        }
        self.acc_map(grads, op.refs, |i| g_ref[i]);
        self.acc_map(grads, op.offsets, |i| g_off[i]);
        self.acc_map(grads, op.weights, |i| g_w[i]);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

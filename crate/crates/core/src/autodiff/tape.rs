//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward sweep. Nodes are only ever appended, so the node
//! list is already in topological order and [`Tape::backward`] is a single
//! reverse scan that visits each node once.

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{CilmpError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask applied by [`Tape::softmax_rows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` may attend to columns `j <= i + offset`.
    Causal { offset: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    SoftmaxRows(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    SegmentAttention { q: Var, k: Var, v: Var, seg: usize, scale: f64, probs: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(CilmpError::Numerical(format!(
                "{name} produced a non-finite value"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CilmpError::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, op, &[a, b], name)
    }

    fn map(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, op, &[a], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "hadamard", Op::Hadamard(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, "scale", Op::Scale(a, s), |x| x * s)
    }

    /// Adds the row vector `b` to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(b).numel() != c {
            return Err(CilmpError::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::AddRow(a, b), &[a, b], "add_row")
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(CilmpError::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * k).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(value, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    fn matrix_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(CilmpError::dim(op, sa, sb));
        }
        Ok((sa[0], sa[1], sb[0], sb[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = self.matrix_dims("matmul", a, b)?;
        if k != k2 {
            return Err(CilmpError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, k2) = self.matrix_dims("matmul_nt", a, b)?;
        if k != k2 {
            return Err(CilmpError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(CilmpError::dim("transpose", self.shape(a), &[]));
        }
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a], "transpose")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| CilmpError::Config("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(CilmpError::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(CilmpError::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push(Tensor::from_parts(shape, data), op, inputs, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(CilmpError::dim("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice { input: a, axis, start };
        self.push(Tensor::from_parts(out_shape, data), op, &[a], "slice")
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(a, 0, start, len)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(CilmpError::Numerical("log of a non-positive value".into()));
        }
        self.map(a, "log", Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, "exp", Op::Exp(a), f64::exp)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "gelu", Op::Gelu(a), gelu)
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = Vec::with_capacity(r);
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            if !(n > NORM_EPS) {
                return Err(CilmpError::Degenerate(format!(
                    "cannot normalise row {i} with norm {n:e}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::L2Normalize { input: a, norms }, &[a], "l2_normalize")
    }

    /// Row-wise softmax with max subtraction; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Mask) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let limit = match mask {
                Mask::None => c,
                Mask::Causal { offset } => (i + offset + 1).min(c),
            };
            let src = &t.row(i)[..limit];
            let dst = &mut data[i * c..i * c + limit];
            softmax_into(src, dst);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::SoftmaxRows(a), &[a], "softmax_rows")
    }

    /// Per-row layer normalisation followed by the affine `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(CilmpError::dim("layer_norm", t.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let op = Op::LayerNorm {
            input: a,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(value, op, &[a, gamma, beta], "layer_norm")
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 {
            return Err(CilmpError::dim("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n {
            return Err(CilmpError::dim("softmax_cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(CilmpError::Label { label: y, classes: c });
            }
            let row = t.row(i);
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss / n as f64), op, &[logits], "softmax_cross_entropy")
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// blocks of `seg` rows: `softmax(scale · Q_s K_sᵀ) V_s` for each block
    /// `s`. With `causal`, row `i` of a block attends to rows `j <= i`.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, seg: usize, causal: bool, scale: f64) -> Result<Var> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        if seg == 0 || n % seg != 0 {
            return Err(CilmpError::dim("segment_attention", &[n, d], &[seg]));
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n * seg];
        let mut out = vec![0.0; n * d];
        let mut scores = vec![0.0; seg];
        for base in (0..n).step_by(seg) {
            for i in 0..seg {
                let limit = if causal { i + 1 } else { seg };
                let qi = tq.row(base + i);
                for (j, s) in scores[..limit].iter_mut().enumerate() {
                    *s = scale * dot(qi, tk.row(base + j));
                }
                let p = &mut probs[(base + i) * seg..(base + i) * seg + limit];
                softmax_into(&scores[..limit], p);
                let o = &mut out[(base + i) * d..(base + i + 1) * d];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(o, tv.row(base + j), pj);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, d], out);
        let op = Op::SegmentAttention { q, k, v, seg, scale, probs };
        self.push(value, op, &[q, k, v], "segment_attention")
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        if indices.is_empty() {
            return Err(CilmpError::Config("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(CilmpError::Index { index: i, len: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), c], data);
        let op = Op::Gather {
            table,
            indices: indices.to_vec(),
        };
        self.push(value, op, &[table], "gather_rows")
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(CilmpError::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((o, &gi), &y) in s.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| axpy(s, g, *k)),
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                let c = nodes[b.0].value.numel();
                acc(*b, &mut |s| {
                    for gi in g.chunks(c) {
                        axpy(s, gi, 1.0);
                    }
                });
            }
            Op::ScaleBy(a, k) => {
                let kv = nodes[k.0].value.item();
                let va = nodes[a.0].value.data();
                acc(*a, &mut |s| axpy(s, g, kv));
                acc(*k, &mut |s| s[0] += dot(va, g));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |s| gemm_nt(g, tb.data(), m, n, k, s));
                acc(*b, &mut |s| gemm_tn(ta.data(), g, m, k, n, s));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A·Bᵀ: dA = dC · B, dB = dCᵀ · A
                acc(*a, &mut |s| gemm_nn(g, tb.data(), m, n, k, s));
                acc(*b, &mut |s| gemm_tn(g, ta.data(), m, n, k, s));
            }
            Op::Transpose(a) => {
                let t = &nodes[a.0].value;
                let (r, c) = (t.rows(), t.cols());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            axpy(&mut s[o * block..(o + 1) * block], src, 1.0);
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = nodes[input.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let base = o * in_shape[*axis] * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut s[base..base + len * inner], src, 1.0);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Log(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(va) {
                        *o += gi / x;
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((o, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Gelu(a) => {
                let va = nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for ((o, &gi), &x) in s.iter_mut().zip(g).zip(va) {
                        *o += gi * gelu_grad(x);
                    }
                });
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let c = y.cols();
                acc(*input, &mut |s| {
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            s[i * c + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |s| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            s[i * c + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { input, gamma, beta, xhat, rstd } => {
                let gm = nodes[gamma.0].value.data();
                let c = gm.len();
                acc(*gamma, &mut |s| {
                    for (i, gi) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            s[j] += gi[j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gi in g.chunks(c) {
                        axpy(s, gi, 1.0);
                    }
                });
                acc(*input, &mut |s| {
                    let mut dxh = vec![0.0; c];
                    for (i, &rs) in rstd.iter().enumerate() {
                        let gi = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxh[j] = gi[j] * gm[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxh, xh) / c as f64;
                        for j in 0..c {
                            s[i * c + j] += rs * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |s| {
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SegmentAttention { q, k, v, seg, scale, probs } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let (n, d) = (tq.rows(), tq.cols());
                let seg = *seg;
                // dS = P ⊙ (dO Vᵀ − rowsum(P ⊙ dO Vᵀ)), scaled once more for Q and K.
                let mut ds = vec![0.0; n * seg];
                for base in (0..n).step_by(seg) {
                    for i in 0..seg {
                        let gi = &g[(base + i) * d..(base + i + 1) * d];
                        let p = &probs[(base + i) * seg..(base + i + 1) * seg];
                        let dsr = &mut ds[(base + i) * seg..(base + i + 1) * seg];
                        let mut inner = 0.0;
                        for j in 0..seg {
                            if p[j] != 0.0 {
                                dsr[j] = dot(gi, tv.row(base + j));
                                inner += p[j] * dsr[j];
                            }
                        }
                        for j in 0..seg {
                            dsr[j] = p[j] * (dsr[j] - inner) * scale;
                        }
                    }
                }
                acc(*q, &mut |s| {
                    for base in (0..n).step_by(seg) {
                        for i in 0..seg {
                            let dsr = &ds[(base + i) * seg..(base + i + 1) * seg];
                            let dst = &mut s[(base + i) * d..(base + i + 1) * d];
                            for (j, &w) in dsr.iter().enumerate() {
                                axpy(dst, tk.row(base + j), w);
                            }
                        }
                    }
                });
                acc(*k, &mut |s| {
                    for base in (0..n).step_by(seg) {
                        for i in 0..seg {
                            let dsr = &ds[(base + i) * seg..(base + i + 1) * seg];
                            for (j, &w) in dsr.iter().enumerate() {
                                axpy(&mut s[(base + j) * d..(base + j + 1) * d], tq.row(base + i), w);
                            }
                        }
                    }
                });
                acc(*v, &mut |s| {
                    for base in (0..n).step_by(seg) {
                        for i in 0..seg {
                            let p = &probs[(base + i) * seg..(base + i + 1) * seg];
                            let gi = &g[(base + i) * d..(base + i + 1) * d];
                            for (j, &pj) in p.iter().enumerate() {
                                axpy(&mut s[(base + j) * d..(base + j + 1) * d], gi, pj);
                            }
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let c = node.value.cols();
                acc(*table, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(&mut s[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += k * x;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - m).exp();
        z += *d;
    }
    dst.iter_mut().for_each(|d| *d /= z);
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

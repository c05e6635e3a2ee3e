//! Define-by-run reverse-mode graph.
//!
//! Every op computes its output eagerly and records what backward needs.
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::kernels;
use super::{AutodiffError, Gradients, ParamId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Attention masking pattern for [`Graph::masked_softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every row attends to every column.
    Full,
    /// Rows `< prefix` see columns `< prefix`; row `i >= prefix` also sees
    /// columns `prefix..=i`.
    PrefixCausal { prefix: usize },
}

impl AttentionMask {
    /// Number of leading visible columns for row `i`.
    pub fn visible(&self, i: usize, cols: usize) -> usize {
        match *self {
            AttentionMask::Full => cols,
            AttentionMask::PrefixCausal { prefix } => {
                if i < prefix {
                    prefix.min(cols)
                } else {
                    (i + 1).min(cols)
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MaskedSoftmax(NodeId, AttentionMask),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        moments: Vec<(f64, f64)>,
    },
    Gelu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSigmoid(NodeId),
    Sum(NodeId),
}

enum Value<'p, T: Scalar> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T: Scalar> Value<'_, T> {
    fn tensor(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p, T: Scalar> {
    op: Op,
    value: Value<'p, T>,
    requires_grad: bool,
}

/// Recording graph. Parameters are borrowed, never copied.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.tensor()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Constant input (never receives a gradient).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Borrowed parameter leaf. Gradients are collected only if `trainable`.
    pub fn param(&mut self, t: &'p Tensor<T>, id: ParamId, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Value::Borrowed(t),
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), t, rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulNT(a, b), t, rg))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor<T>, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), t, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    /// Broadcast-add a `[n]` (or `[1, n]`) row to every row of `a[m, n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(mismatch("add_row", ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(r)
                    .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), t, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let t = self.value(a).map(|v| T::from_f64(v.to_f64() * factor));
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), t, rg)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: NodeId, c: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("add_const", ta.shape(), c.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::AddConst(a), t, rg))
    }

    /// Row softmax; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, a: NodeId, mask: AttentionMask) -> Result<NodeId, AutodiffError> {
        let (m, n) = dims2("softmax", self.value(a))?;
        let mut t = self.value(a).clone();
        for i in 0..m {
            let valid = mask.visible(i, n);
            if valid == 0 {
                return Err(mismatch("softmax", &[m, n], &[i, 0]));
            }
            kernels::softmax_row(&mut t.data_mut()[i * n..(i + 1) * n], valid);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaskedSoftmax(a, mask), t, rg))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.masked_softmax(a, AttentionMask::Full)
    }

    /// Row-wise layer norm with affine gain and bias (both `[n]`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let mut out = vec![T::zero(); tx.len()];
        let mut moments = Vec::with_capacity(tx.rows());
        for (xr, or) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
            moments.push(kernels::layer_norm_row(xr, tg.data(), tb.data(), or));
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, moments }, t, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| T::from_f64(kernels::gelu(v.to_f64())));
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), t, rg)
    }

    /// Gather rows of `table[V, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = dims2("embedding", self.value(table))?;
        let tt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (m, n) = dims2("slice_cols", self.value(a))?;
        if start + len > n {
            return Err(mismatch("slice_cols", &[m, n], &[start, len]));
        }
        let ta = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols { a, start }, t, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (m, n) = dims2("slice_rows", self.value(a))?;
        if start + len > m {
            return Err(mismatch("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows { a, start }, t, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.value(p))?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, rg))
    }

    /// Summed token cross-entropy: `Σ_i −log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, AutodiffError> {
        let (m, v) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != m {
            return Err(mismatch("cross_entropy", &[m, v], &[targets.len()]));
        }
        let tl = self.value(logits);
        let mut probs = Vec::with_capacity(m * v);
        let mut loss = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    bound: v,
                });
            }
            let lp = kernels::log_softmax(tl.row(i));
            loss -= lp[tgt];
            probs.extend(lp.iter().map(|l| l.exp()));
        }
        let t = Tensor::scalar(T::from_f64(loss));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            t,
            rg,
        ))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| T::from_f64(kernels::log_sigmoid(v.to_f64())));
        let rg = self.rg(&[a]);
        self.push(Op::LogSigmoid(a), t, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(T::from_f64(s)), rg)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// trainable parameter the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let shape = node.value.tensor().shape().to_vec();
                    let t = Tensor::new(shape, g.iter().map(|&v| T::from_f64(v)).collect())?;
                    match out.get(*pid) {
                        Some(prev) => {
                            let mut sum = prev.clone();
                            sum.add_assign(&t)?;
                            out.insert(*pid, sum);
                        }
                        None => out.insert(*pid, t),
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    if self.requires_grad(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        let bd: Vec<f64> = tb.data().iter().map(|v| v.to_f64()).collect();
                        kernels::matmul_nt(&g, &bd, m, n, k, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        let ad: Vec<f64> = ta.data().iter().map(|v| v.to_f64()).collect();
                        kernels::matmul_tn(&ad, &g, m, k, n, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    // C = A Bᵀ, A[m,k], B[n,k]
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.rows();
                    if self.requires_grad(*a) {
                        let mut da = vec![0.0; m * k];
                        let bd: Vec<f64> = tb.data().iter().map(|v| v.to_f64()).collect();
                        kernels::matmul_nn(&g, &bd, m, n, k, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; n * k];
                        let ad: Vec<f64> = ta.data().iter().map(|v| v.to_f64()).collect();
                        kernels::matmul_tn(&g, &ad, m, n, k, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let tb = self.value(*b).data();
                        accumulate(&mut grads, *a, g.iter().zip(tb).map(|(x, y)| x * y.to_f64()).collect());
                    }
                    if self.requires_grad(*b) {
                        let ta = self.value(*a).data();
                        accumulate(&mut grads, *b, g.iter().zip(ta).map(|(x, y)| x * y.to_f64()).collect());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*row) {
                        let n = self.value(*row).len();
                        let mut dr = vec![0.0; n];
                        for chunk in g.chunks(n) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *row, dr);
                    }
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * f).collect());
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::MaskedSoftmax(a, mask) => {
                    let y = node.value.tensor();
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let valid = mask.visible(i, n);
                        let yr = &y.data()[i * n..i * n + valid];
                        let gr = &g[i * n..i * n + valid];
                        let s: f64 = yr.iter().zip(gr).map(|(y, g)| y.to_f64() * g).sum();
                        for j in 0..valid {
                            da[i * n + j] = yr[j].to_f64() * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, moments } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gain).data();
                    let n = tx.cols();
                    let m = tx.rows();
                    let mut dx = vec![0.0; m * n];
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        let (mean, rstd) = moments[i];
                        let xr = &tx.data()[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut mean_dyh = 0.0;
                        let mut mean_dyh_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xr[j].to_f64() - mean) * rstd;
                            dg[j] += gr[j] * xhat;
                            db[j] += gr[j];
                            let dyh = gr[j] * tg[j].to_f64();
                            mean_dyh += dyh;
                            mean_dyh_xhat += dyh * xhat;
                        }
                        if rstd == 0.0 {
                            // Constant row: output is constant in x.
                            continue;
                        }
                        mean_dyh /= n as f64;
                        mean_dyh_xhat /= n as f64;
                        for j in 0..n {
                            let xhat = (xr[j].to_f64() - mean) * rstd;
                            let dyh = gr[j] * tg[j].to_f64();
                            dx[i * n + j] = rstd * (dyh - mean_dyh - xhat * mean_dyh_xhat);
                        }
                    }
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.requires_grad(*gain) {
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.requires_grad(*bias) {
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(ta).map(|(g, x)| g * kernels::gelu_grad(x.to_f64())).collect(),
                    );
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0; tt.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceCols { a, start } => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let len = node.value.tensor().cols();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows { a, start } => {
                    let ta = self.value(*a);
                    let n = ta.cols();
                    let mut da = vec![0.0; ta.len()];
                    da[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.tensor().rows();
                    let total = node.value.tensor().cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.requires_grad(p) {
                            let mut dp = Vec::with_capacity(m * w);
                            for i in 0..m {
                                dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.requires_grad(p) {
                            accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = self.value(*logits).cols();
                    let scale = g[0];
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * v + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::LogSigmoid(a) => {
                    let ta = self.value(*a).data();
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter()
                            .zip(ta)
                            .map(|(g, x)| g * kernels::sigmoid(-x.to_f64()))
                            .collect(),
                    );
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

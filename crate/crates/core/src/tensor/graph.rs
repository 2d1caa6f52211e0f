use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxMasked(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Resize(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations. Node inputs always precede the
/// node itself, so reverse insertion order is a valid reverse topological
/// order for [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How a binary op lines its operands up: equal shapes, or the smaller
/// operand's shape is a trailing suffix of the larger one.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    RhsTrailing,
    LhsTrailing,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Broadcast::RhsTrailing)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Broadcast::LhsTrailing)
    } else {
        Err(dim_err(op, a, b))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    match kind {
        Broadcast::Same => Tensor::from_parts(a.shape().to_vec(), ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()),
        Broadcast::RhsTrailing => Tensor::from_parts(
            a.shape().to_vec(),
            ad.iter().zip(bd.iter().cycle()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::LhsTrailing => Tensor::from_parts(
            b.shape().to_vec(),
            ad.iter().cycle().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        ),
    }
}

/// Reduce a full-size gradient onto an operand of `len` elements that was
/// broadcast by repetition.
fn fold_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks_exact(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only: leaves never require gradients and
    /// no backward buffers are retained.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn keep_saved(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("add", self.shape(a), self.shape(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a - b`; `b` may broadcast over trailing dimensions of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("sub", self.shape(a), self.shape(b))?;
        if matches!(kind, Broadcast::LhsTrailing) {
            return Err(dim_err("sub", self.shape(a), self.shape(b)));
        }
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_kind("mul", self.shape(a), self.shape(b))?;
        let out = zip_broadcast(self.value(a), self.value(b), kind, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Sum over every axis but the last: `[..., c] -> [c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, c) = v.rows_cols();
        let out = Tensor::from_parts(vec![c], fold_to(v.data(), c));
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Softmax along the last axis restricted to positions where `mask` is
    /// true. `mask` has either one entry per element or one per column
    /// (shared by every row). Masked positions are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(a);
        let (rows, n) = v.rows_cols();
        if mask.len() != n && mask.len() != v.len() {
            return Err(dim_err("softmax_masked", v.shape(), &[mask.len()]));
        }
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let x = &v.data()[r * n..(r + 1) * n];
            let m = if mask.len() == n {
                mask
            } else {
                &mask[r * n..(r + 1) * n]
            };
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&xi, _)| xi)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::InvalidMask {
                    op: "softmax_masked",
                    reason: format!("row {r} is fully masked"),
                });
            }
            let y = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for ((yi, &xi), &keep) in y.iter_mut().zip(x).zip(m) {
                if keep {
                    *yi = (xi - max).exp();
                    total += *yi;
                }
            }
            for yi in y.iter_mut() {
                *yi /= total;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("softmax_masked", out, Op::SoftmaxMasked(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().expect("rank >= 1");
        self.softmax_masked(a, &vec![true; n])
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    /// Constant rows normalise to zero (variance floored by `eps`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let (rows, c) = v.rows_cols();
        if c < 2 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err("layer_norm", v.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        let keep = self.keep_saved(&[x, gamma]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            inv_std,
        };
        self.push("layer_norm", out, op, &[x, gamma, beta])
    }

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k`
    /// kernel, zero padding, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(dim_err("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.output_extent().ok_or_else(|| dim_err("conv2d", sx, sw))?;
        let c_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err("conv2d bias", sw, self.shape(b)));
            }
        }
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out = kernels::gemm(self.value(w).data(), &cols, c_out, geom.patch_len(), oh * ow);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, &bv) in out.chunks_exact_mut(oh * ow).zip(bias) {
                for o in chunk {
                    *o += bv;
                }
            }
        }
        let out = Tensor::from_parts(vec![c_out, oh, ow], out);
        let keep = self.keep_saved(&[w]);
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: if keep { cols } else { Vec::new() },
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, op, &inputs)
    }

    /// Nearest-neighbour resize of a `C×H×W` tensor to `C×height×width`.
    pub fn resize_nearest(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || height == 0 || width == 0 {
            return Err(dim_err("resize_nearest", s, &[height, width]));
        }
        let c = s[0];
        let out = kernels::resize_nearest(self.value(x).data(), c, (s[1], s[2]), (height, width));
        let out = Tensor::from_parts(vec![c, height, width], out);
        self.push("resize_nearest", out, Op::Resize(x), &[x])
    }

    /// Integer-factor nearest-neighbour upsampling of a `C×H×W` tensor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || factor == 0 {
            return Err(dim_err("upsample_nearest", s, &[factor]));
        }
        let (h, w) = (s[1] * factor, s[2] * factor);
        self.resize_nearest(x, h, w)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], out);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(dim_err("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(dim_err("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::from_parts(vec![rows, len], out);
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(dim_err("slice_rows", s, &[start, len]));
        }
        let cols = s[1];
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_parts(vec![len, cols], out);
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    /// Row lookup `table[ids]`, e.g. a word-embedding table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(dim_err("gather_rows", s, &[ids.len()]));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::Validation(format!(
                "row id {bad} out of range for table of {n} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", out, op, &[table])
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`, in the
    /// stable form `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let v = self.value(logits);
        if v.shape() != targets.shape() {
            return Err(dim_err("bce_with_logits", v.shape(), targets.shape()));
        }
        if let Some(bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Validation(format!("binary target expected, found {bad}")));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / v.len() as f64);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.clone(),
        };
        self.push("bce_with_logits", out, op, &[logits])
    }

    /// Sign of every relu input recorded so far, in node order. Two
    /// evaluations of the same function with equal patterns lie on the same
    /// smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Reverse-mode accumulation from a one-element `loss`. Contributions
    /// are summed in reverse node order, so results are deterministic.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        debug_assert_eq!(contrib.len(), self.nodes[v.0].value.len());
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_broadcast(&self, grads: &mut [Option<Vec<f64>>], a: Var, b: Var, ga: Vec<f64>, gb: Vec<f64>) {
        if self.needs(a) {
            let len = self.value(a).len();
            self.accumulate(grads, a, fold_to(&ga, len));
        }
        if self.needs(b) {
            let len = self.value(b).len();
            self.accumulate(grads, b, fold_to(&gb, len));
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::gemm_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::gemm_tn(self.value(*a).data(), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.accumulate(grads, *a, kernels::transpose(g, s[0], s[1]));
            }
            Op::Add(a, b) => {
                self.backprop_broadcast(grads, *a, *b, g.to_vec(), g.to_vec());
            }
            Op::Sub(a, b) => {
                let neg = g.iter().map(|x| -x).collect();
                self.backprop_broadcast(grads, *a, *b, g.to_vec(), neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = g.len();
                let ga = if self.needs(*a) {
                    (0..n).map(|i| g[i] * vb[i % vb.len()]).collect()
                } else {
                    Vec::new()
                };
                let gb = if self.needs(*b) {
                    (0..n).map(|i| g[i] * va[i % va.len()]).collect()
                } else {
                    Vec::new()
                };
                self.backprop_broadcast(grads, *a, *b, ga, gb);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * f).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(out).map(|(&gi, &y)| gi * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let n = self.value(*a).len();
                let d = (0..n).map(|i| g[i % g.len()]).collect();
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxMasked(a) => {
                let (rows, n) = node.value.rows_cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, c) = node.value.rows_cols();
                let gm = self.value(*gamma).data();
                if self.needs(*x) {
                    let mut d = vec![0.0; out.len()];
                    for r in 0..rows {
                        let gy: Vec<f64> = (0..c).map(|j| g[r * c + j] * gm[j]).collect();
                        let h = &xhat[r * c..(r + 1) * c];
                        let mean_gy = gy.iter().sum::<f64>() / c as f64;
                        let mean_gyh = gy.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[r * c + j] = inv_std[r] * (gy[j] - mean_gy - h[j] * mean_gyh);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.needs(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    self.accumulate(grads, *gamma, fold_to(&prod, c));
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, fold_to(g, c));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = node.value.shape()[0];
                let spatial = g.len() / c_out;
                let patch = geom.patch_len();
                if self.needs(*w) {
                    self.accumulate(grads, *w, kernels::gemm_nt(g, cols, c_out, spatial, patch));
                }
                if self.needs(*x) {
                    let dcols = kernels::gemm_tn(self.value(*w).data(), g, patch, c_out, spatial);
                    self.accumulate(grads, *x, kernels::col2im(&dcols, geom));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let d = g.chunks_exact(spatial).map(|ch| ch.iter().sum()).collect();
                        self.accumulate(grads, *b, d);
                    }
                }
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let o = node.value.shape();
                let d = kernels::resize_nearest_adjoint(g, s[0], (s[1], s[2]), (o[1], o[2]));
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (rows, cols) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let cols = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, d);
            }
            Op::Gather { table, ids } => {
                let d_model = self.shape(*table)[1];
                let mut d = vec![0.0; self.value(*table).len()];
                for (row, &i) in ids.iter().enumerate() {
                    for j in 0..d_model {
                        d[i * d_model + j] += g[row * d_model + j];
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / z.len() as f64;
                let d = z
                    .iter()
                    .zip(targets.data())
                    .map(|(&zi, &t)| (sigmoid(zi) - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

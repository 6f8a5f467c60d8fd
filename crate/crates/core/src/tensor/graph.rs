use super::kernels::{self, AttnDims};
use super::{mismatch, Tensor, TensorError, NORM_EPS};

/// Clamp applied to `acos` inputs so the derivative stays bounded.
pub const ACOS_CLAMP: f64 = 1.0 - 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive kinds. Unless noted, operands are 2-D row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    /// m×k · k×n.
    Matmul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    ScalarMul(f64),
    /// m×n plus a broadcast 1×n row.
    AddRow,
    RowSoftmax,
    /// Inputs: x (m×n), gain (1×n), bias (1×n).
    LayerNorm,
    Gelu,
    /// Gathers rows of a table by id.
    EmbedLookup(Vec<usize>),
    Transpose,
    Sum,
    Mean,
    Dot,
    /// sqrt(Σx² + NORM_EPS).
    L2Norm,
    ConcatRows,
    SliceRows { start: usize, len: usize },
    /// Cosine similarity of two same-shape tensors; each norm is clamped
    /// below at NORM_EPS.
    Cosine,
    /// Elementwise arccos with inputs clamped to ±ACOS_CLAMP.
    Acos,
    /// Σ_i w_i · (−log softmax(z_i)[target_i]); rows with w_i = 0 are skipped.
    CrossEntropy { targets: Vec<usize>, weights: Vec<f64> },
    /// Packed multi-head causal self-attention over `batch` blocks of `seq`
    /// rows. Inputs: q, k, v.
    CausalAttention { batch: usize, seq: usize, heads: usize },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::AddRow => "add_row",
            Op::RowSoftmax => "row_softmax",
            Op::LayerNorm => "layer_norm",
            Op::Gelu => "gelu",
            Op::EmbedLookup(_) => "embed_lookup",
            Op::Transpose => "transpose",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Dot => "dot",
            Op::L2Norm => "l2_norm",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Cosine => "cosine",
            Op::Acos => "acos",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CausalAttention { .. } => "causal_attention",
        }
    }

    /// Parses a parameterless primitive tag.
    pub fn from_tag(tag: &str) -> Result<Op, TensorError> {
        Ok(match tag {
            "matmul" => Op::Matmul,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "add_row" => Op::AddRow,
            "row_softmax" => Op::RowSoftmax,
            "layer_norm" => Op::LayerNorm,
            "gelu" => Op::Gelu,
            "transpose" => Op::Transpose,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "dot" => Op::Dot,
            "l2_norm" => Op::L2Norm,
            "concat_rows" => Op::ConcatRows,
            "cosine" => Op::Cosine,
            "acos" => Op::Acos,
            other => return Err(TensorError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Saved {
    None,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Probs(Vec<f64>),
    Cosine { na: f64, nb: f64, dot: f64, clamp_a: bool, clamp_b: bool },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Append-only tape. Node inputs always precede the node, so reverse append
/// order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_ran: bool,
}

fn expect_2d(kind: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(kind, format!("expected a matrix, got {s:?}"))),
    }
}

fn same_shape(kind: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(kind, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn arity(kind: &'static str, inputs: &[Var], n: usize) -> Result<(), TensorError> {
    if inputs.len() != n {
        return Err(mismatch(kind, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad, Saved::None)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_ran = false;
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<Var>,
        value: Tensor,
        requires_grad: bool,
        saved: Saved,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates a primitive and records it. A backward rule is attached
    /// whenever any input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::Invalid(format!("dangling handle {}", bad.0)));
        }
        let (value, saved) = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Activations are only kept when backward will need them.
        let saved = if requires_grad { saved } else { Saved::None };
        Ok(self.push(op, inputs.to_vec(), value, requires_grad, saved))
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<(Tensor, Saved), TensorError> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let kind = op.tag();
        let plain = |t: Tensor| Ok((t, Saved::None));
        match op {
            Op::Leaf => Err(TensorError::Invalid("leaf is not a primitive".into())),
            Op::Matmul => {
                arity(kind, inputs, 2)?;
                let (m, k) = expect_2d(kind, val(0))?;
                let (k2, n) = expect_2d(kind, val(1))?;
                if k != k2 {
                    return Err(mismatch(kind, format!("{m}x{k} · {k2}x{n}")));
                }
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, val(0).data(), false, val(1).data(), false, &mut out, 0.0);
                plain(Tensor::matrix(m, n, out)?)
            }
            Op::Add | Op::Sub | Op::Mul => {
                arity(kind, inputs, 2)?;
                same_shape(kind, val(0), val(1))?;
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |a, b| a + b,
                    Op::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = val(0).data().iter().zip(val(1).data()).map(|(&a, &b)| f(a, b)).collect();
                plain(Tensor::new(val(0).shape().to_vec(), data)?)
            }
            Op::ScalarMul(c) => {
                arity(kind, inputs, 1)?;
                let data = val(0).data().iter().map(|a| a * c).collect();
                plain(Tensor::new(val(0).shape().to_vec(), data)?)
            }
            Op::AddRow => {
                arity(kind, inputs, 2)?;
                let (m, n) = expect_2d(kind, val(0))?;
                if val(1).shape() != [1, n] {
                    return Err(mismatch(kind, format!("row {:?} vs {m}x{n}", val(1).shape())));
                }
                let r = val(1).data();
                let mut data = val(0).data().to_vec();
                for row in data.chunks_mut(n) {
                    for (x, b) in row.iter_mut().zip(r) {
                        *x += b;
                    }
                }
                plain(Tensor::matrix(m, n, data)?)
            }
            Op::RowSoftmax => {
                arity(kind, inputs, 1)?;
                let (m, n) = expect_2d(kind, val(0))?;
                let mut data = val(0).data().to_vec();
                for row in data.chunks_mut(n) {
                    softmax_in_place(row);
                }
                plain(Tensor::matrix(m, n, data)?)
            }
            Op::LayerNorm => {
                arity(kind, inputs, 3)?;
                let (m, n) = expect_2d(kind, val(0))?;
                if val(1).shape() != [1, n] || val(2).shape() != [1, n] {
                    return Err(mismatch(
                        kind,
                        format!("affine {:?}/{:?} vs width {n}", val(1).shape(), val(2).shape()),
                    ));
                }
                let (g, b) = (val(1).data(), val(2).data());
                let mut xhat = val(0).data().to_vec();
                let mut inv_std = Vec::with_capacity(m);
                let mut out = vec![0.0; m * n];
                for (row, orow) in xhat.chunks_mut(n).zip(out.chunks_mut(n)) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std.push(is);
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = (*x - mean) * is;
                        orow[j] = *x * g[j] + b[j];
                    }
                }
                Ok((Tensor::matrix(m, n, out)?, Saved::LayerNorm { xhat, inv_std }))
            }
            Op::Gelu => {
                arity(kind, inputs, 1)?;
                let data = val(0).data().iter().map(|&x| kernels::gelu(x)).collect();
                plain(Tensor::new(val(0).shape().to_vec(), data)?)
            }
            Op::EmbedLookup(ids) => {
                arity(kind, inputs, 1)?;
                let (vocab, d) = expect_2d(kind, val(0))?;
                if ids.is_empty() {
                    return Err(mismatch(kind, "empty id list"));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(mismatch(kind, format!("id {bad} outside table of {vocab} rows")));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    data.extend_from_slice(val(0).row(i));
                }
                plain(Tensor::matrix(ids.len(), d, data)?)
            }
            Op::Transpose => {
                arity(kind, inputs, 1)?;
                let (m, n) = expect_2d(kind, val(0))?;
                plain(Tensor::matrix(n, m, transpose(m, n, val(0).data()))?)
            }
            Op::Sum => {
                arity(kind, inputs, 1)?;
                plain(Tensor::scalar(val(0).data().iter().sum()))
            }
            Op::Mean => {
                arity(kind, inputs, 1)?;
                let t = val(0);
                plain(Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64))
            }
            Op::Dot => {
                arity(kind, inputs, 2)?;
                same_shape(kind, val(0), val(1))?;
                plain(Tensor::scalar(kernels::dot(val(0).data(), val(1).data())))
            }
            Op::L2Norm => {
                arity(kind, inputs, 1)?;
                let ss: f64 = val(0).data().iter().map(|x| x * x).sum();
                plain(Tensor::scalar((ss + NORM_EPS).sqrt()))
            }
            Op::ConcatRows => {
                if inputs.is_empty() {
                    return Err(mismatch(kind, "no inputs"));
                }
                let (_, n) = expect_2d(kind, val(0))?;
                let mut rows = 0;
                let mut data = Vec::new();
                for i in 0..inputs.len() {
                    let (r, c) = expect_2d(kind, val(i))?;
                    if c != n {
                        return Err(mismatch(kind, format!("width {c} vs {n}")));
                    }
                    rows += r;
                    data.extend_from_slice(val(i).data());
                }
                plain(Tensor::matrix(rows, n, data)?)
            }
            Op::SliceRows { start, len } => {
                arity(kind, inputs, 1)?;
                let (m, _) = expect_2d(kind, val(0))?;
                if *len == 0 || start + len > m {
                    return Err(mismatch(kind, format!("rows {start}..{} of {m}", start + len)));
                }
                plain(val(0).slice_rows(*start, *len))
            }
            Op::Cosine => {
                arity(kind, inputs, 2)?;
                same_shape(kind, val(0), val(1))?;
                let (a, b) = (val(0).data(), val(1).data());
                let dot = kernels::dot(a, b);
                let ra = kernels::dot(a, a).sqrt();
                let rb = kernels::dot(b, b).sqrt();
                let (clamp_a, clamp_b) = (ra < NORM_EPS, rb < NORM_EPS);
                let na = ra.max(NORM_EPS);
                let nb = rb.max(NORM_EPS);
                Ok((
                    Tensor::scalar(dot / (na * nb)),
                    Saved::Cosine { na, nb, dot, clamp_a, clamp_b },
                ))
            }
            Op::Acos => {
                arity(kind, inputs, 1)?;
                let data = val(0)
                    .data()
                    .iter()
                    .map(|x| x.clamp(-ACOS_CLAMP, ACOS_CLAMP).acos())
                    .collect();
                plain(Tensor::new(val(0).shape().to_vec(), data)?)
            }
            Op::CrossEntropy { targets, weights } => {
                arity(kind, inputs, 1)?;
                let (m, n) = expect_2d(kind, val(0))?;
                if targets.len() != m || weights.len() != m {
                    return Err(mismatch(
                        kind,
                        format!("{m} rows, {} targets, {} weights", targets.len(), weights.len()),
                    ));
                }
                let mut probs = vec![0.0; m * n];
                let mut loss = 0.0;
                for i in 0..m {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    if targets[i] >= n {
                        return Err(mismatch(kind, format!("target {} ≥ {n} classes", targets[i])));
                    }
                    let row = val(0).row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    loss += weights[i] * (lse - row[targets[i]]);
                    for (p, z) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *p = (z - lse).exp();
                    }
                }
                Ok((Tensor::scalar(loss), Saved::Probs(probs)))
            }
            Op::CausalAttention { batch, seq, heads } => {
                arity(kind, inputs, 3)?;
                let (m, d) = expect_2d(kind, val(0))?;
                same_shape(kind, val(0), val(1))?;
                same_shape(kind, val(0), val(2))?;
                if *heads == 0 || d % heads != 0 || m != batch * seq {
                    return Err(mismatch(
                        kind,
                        format!("{m}x{d} with batch {batch}, seq {seq}, heads {heads}"),
                    ));
                }
                let dims = AttnDims { batch: *batch, seq: *seq, heads: *heads, width: d };
                let (out, probs) =
                    kernels::attention_forward(val(0).data(), val(1).data(), val(2).data(), dims);
                Ok((Tensor::matrix(m, d, out)?, Saved::Probs(probs)))
            }
        }
    }

    /// Reverse pass from a scalar loss. Populates gradients of every leaf
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                self.grads[id] = Some(g);
                continue;
            }
            backprop_node(&self.nodes, node, &g, &mut self.grads);
        }
        self.backward_ran = true;
        Ok(())
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.apply(Op::AddRow, &[a, row])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::RowSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        self.apply(Op::LayerNorm, &[x, gain, bias])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var, TensorError> {
        self.apply(Op::EmbedLookup(ids), &[table])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Mean, &[a])
    }
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Dot, &[a, b])
    }
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::L2Norm, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.apply(Op::ConcatRows, parts)
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.apply(Op::SliceRows { start, len }, &[a])
    }
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        self.slice_rows(a, i, 1)
    }
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Op::Cosine, &[a, b])
    }
    pub fn acos(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Op::Acos, &[a])
    }
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var, TensorError> {
        self.apply(Op::CrossEntropy { targets, weights }, &[logits])
    }
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        self.apply(Op::CausalAttention { batch, seq, heads }, &[q, k, v])
    }

    /// `1 − x` for a scalar.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, TensorError> {
        let one = self.constant(Tensor::scalar(1.0));
        self.sub(one, x)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn transpose(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Returns the gradient buffer of `v` if it needs one, allocating zeros.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let inp = &node.inputs;
    let val = |i: usize| &nodes[inp[i].0].value;
    match &node.op {
        Op::Leaf => {}
        // dA = G·Bᵀ, dB = Aᵀ·G
        Op::Matmul => {
            let (m, k) = (val(0).rows(), val(0).cols());
            let n = val(1).cols();
            if let Some(da) = slot(nodes, grads, inp[0]) {
                kernels::gemm(m, n, k, g, false, val(1).data(), true, da, 1.0);
            }
            if let Some(db) = slot(nodes, grads, inp[1]) {
                kernels::gemm(k, m, n, val(0).data(), true, g, false, db, 1.0);
            }
        }
        Op::Add => {
            for &v in inp {
                if let Some(d) = slot(nodes, grads, v) {
                    add_into(d, g);
                }
            }
        }
        Op::Sub => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                add_into(d, g);
            }
            if let Some(d) = slot(nodes, grads, inp[1]) {
                for (x, y) in d.iter_mut().zip(g) {
                    *x -= y;
                }
            }
        }
        Op::Mul => {
            for (i, &v) in inp.iter().enumerate() {
                let other = val(1 - i).data();
                if let Some(d) = slot(nodes, grads, v) {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
            }
        }
        Op::ScalarMul(c) => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
        }
        Op::AddRow => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                add_into(d, g);
            }
            let n = val(0).cols();
            if let Some(d) = slot(nodes, grads, inp[1]) {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            }
        }
        // Softmax JVP: dx = y ⊙ (g − ⟨g, y⟩) per row.
        Op::RowSoftmax => {
            let n = node.value.cols();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (gy - inner);
                    }
                }
            }
        }
        // With x̂ = (x−μ)σ⁻¹ and dx̂ = g ⊙ gain:
        // dx = σ⁻¹ (dx̂ − mean(dx̂) − x̂ · mean(dx̂ ⊙ x̂)).
        Op::LayerNorm => {
            let Saved::LayerNorm { xhat, inv_std } = &node.saved else {
                unreachable!("layer_norm without saved statistics")
            };
            let n = node.value.cols();
            let gain = val(1).data();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                let mut dxhat = vec![0.0; n];
                for (i, (drow, grow)) in d.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let xh = &xhat[i * n..(i + 1) * n];
                    for j in 0..n {
                        dxhat[j] = grow[j] * gain[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = kernels::dot(&dxhat, xh) / n as f64;
                    for j in 0..n {
                        drow[j] += inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, inp[1]) {
                for (grow, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        d[j] += grow[j] * xh[j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, inp[2]) {
                for grow in g.chunks(n) {
                    add_into(d, grow);
                }
            }
        }
        Op::Gelu => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for ((x, gy), xin) in d.iter_mut().zip(g).zip(val(0).data()) {
                    *x += gy * kernels::gelu_grad(*xin);
                }
            }
        }
        Op::EmbedLookup(ids) => {
            let dm = val(0).cols();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * dm..(id + 1) * dm], &g[k * dm..(k + 1) * dm]);
                }
            }
        }
        Op::Transpose => {
            let (m, n) = (val(0).rows(), val(0).cols());
            if let Some(d) = slot(nodes, grads, inp[0]) {
                add_into(d, &transpose(n, m, g));
            }
        }
        Op::Sum => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean => {
            let n = val(0).numel() as f64;
            if let Some(d) = slot(nodes, grads, inp[0]) {
                d.iter_mut().for_each(|x| *x += g[0] / n);
            }
        }
        Op::Dot => {
            for (i, &v) in inp.iter().enumerate() {
                let other = val(1 - i).data();
                if let Some(d) = slot(nodes, grads, v) {
                    for (x, o) in d.iter_mut().zip(other) {
                        *x += g[0] * o;
                    }
                }
            }
        }
        Op::L2Norm => {
            let norm = node.value.item();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for (x, a) in d.iter_mut().zip(val(0).data()) {
                    *x += g[0] * a / norm;
                }
            }
        }
        Op::ConcatRows => {
            let mut off = 0;
            for (i, &v) in inp.iter().enumerate() {
                let n = val(i).numel();
                if let Some(d) = slot(nodes, grads, v) {
                    add_into(d, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::SliceRows { start, .. } => {
            let c = val(0).cols();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                add_into(&mut d[start * c..start * c + g.len()], g);
            }
        }
        // c = ⟨a,b⟩/(|a||b|): dc/da = b/(|a||b|) − c·a/|a|² (second term
        // vanishes when the norm sits on its clamp).
        Op::Cosine => {
            let Saved::Cosine { na, nb, dot, clamp_a, clamp_b } = node.saved else {
                unreachable!("cosine without saved norms")
            };
            let c = dot / (na * nb);
            let parts = [(0, na, clamp_a), (1, nb, clamp_b)];
            for (i, own, clamped) in parts {
                let other = val(1 - i).data();
                let mine = val(i).data();
                if let Some(d) = slot(nodes, grads, inp[i]) {
                    for ((x, o), a) in d.iter_mut().zip(other).zip(mine) {
                        let mut t = o / (na * nb);
                        if !clamped {
                            t -= c * a / (own * own);
                        }
                        *x += g[0] * t;
                    }
                }
            }
        }
        Op::Acos => {
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for ((x, gy), xin) in d.iter_mut().zip(g).zip(val(0).data()) {
                    if xin.abs() < ACOS_CLAMP {
                        *x -= gy / (1.0 - xin * xin).sqrt();
                    }
                }
            }
        }
        // dz_i = w_i (softmax(z_i) − onehot(target_i))
        Op::CrossEntropy { targets, weights } => {
            let Saved::Probs(probs) = &node.saved else {
                unreachable!("cross_entropy without saved probabilities")
            };
            let n = val(0).cols();
            if let Some(d) = slot(nodes, grads, inp[0]) {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut d[i * n..(i + 1) * n];
                    for (x, p) in row.iter_mut().zip(&probs[i * n..(i + 1) * n]) {
                        *x += g[0] * w * p;
                    }
                    row[t] -= g[0] * w;
                }
            }
        }
        Op::CausalAttention { batch, seq, heads } => {
            let Saved::Probs(probs) = &node.saved else {
                unreachable!("attention without saved probabilities")
            };
            let dims = AttnDims {
                batch: *batch,
                seq: *seq,
                heads: *heads,
                width: node.value.cols(),
            };
            let (q, k, v) = (val(0).data(), val(1).data(), val(2).data());
            // Borrow three distinct gradient slots; take them out to satisfy
            // the borrow checker, then put them back.
            let mut taken: [Option<Vec<f64>>; 3] = [None, None, None];
            for (i, t) in taken.iter_mut().enumerate() {
                if slot(nodes, grads, inp[i]).is_some() {
                    *t = grads[inp[i].0].take();
                }
            }
            let [tq, tk, tv] = &mut taken;
            kernels::attention_backward(
                q,
                k,
                v,
                probs,
                g,
                dims,
                tq.as_deref_mut(),
                tk.as_deref_mut(),
                tv.as_deref_mut(),
            );
            for (i, t) in taken.into_iter().enumerate() {
                if let Some(buf) = t {
                    // q, k and v may alias the same node; merge if so.
                    match &mut grads[inp[i].0] {
                        Some(existing) => add_into(existing, &buf),
                        empty => *empty = Some(buf),
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! Append-only reverse-mode tape.
//!
//! Each recorded node keeps its forward value and enough saved state for its
//! vector-Jacobian product. The same record drives the relevance pass in
//! [`crate::attribution::lrp`], which walks the nodes in the same reverse
//! order with different per-primitive rules.

use crate::error::{Error, Result};
use crate::ops::{self, NormStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive. Operand references always point to earlier nodes.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// `a · b`
    MatMul { a: NodeId, b: NodeId },
    /// `a · bᵀ`
    MatMulNt { a: NodeId, b: NodeId },
    /// `x · wᵀ + bias`
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    /// `probs · v`; a matmul tagged so relevance rules can single out the
    /// attention product.
    AttnApply { probs: NodeId, v: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// `x + sign * row`, broadcast over rows.
    AddRow { x: NodeId, row: NodeId, sign: f64 },
    Scale { x: NodeId, c: f64 },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: NormStats,
    },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId },
    Patchify { image: NodeId, patch: usize },
    ConcatRows { a: NodeId, b: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    SelectRow { x: NodeId, row: usize },
    SumSquares { x: NodeId },
    SumAbs { x: NodeId },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | MatMulNt { a, b } | Add { a, b } | Sub { a, b } => vec![*a, *b],
            ConcatRows { a, b } => vec![*a, *b],
            Linear { x, w, bias } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            AttnApply { probs, v } => vec![*probs, *v],
            AddRow { x, row, .. } => vec![*x, *row],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Scale { x, .. }
            | Gelu { x }
            | Relu { x }
            | Softmax { x }
            | SliceCols { x, .. }
            | SelectRow { x, .. }
            | SumSquares { x }
            | SumAbs { x } => vec![*x],
            Patchify { image, .. } => vec![*image],
            ConcatCols { parts } => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    /// True when the node depends on a differentiable leaf. For model
    /// forward passes this marks everything downstream of the input image.
    pub(crate) requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// `(leaf, gradient)` for every differentiable leaf on the tape. Leaves
    /// the output does not depend on get a zero gradient.
    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.leaves
            .iter()
            .filter_map(move |&id| self.grads[id.0].as_ref().map(|g| (id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Id of the most recently recorded node.
    pub fn last(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not on this tape", id.0)));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (the input being attributed, or trainable
    /// parameters).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNt { a, b }, v))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let mut v = ops::matmul_nt(self.value(x), self.value(w))?;
        if let Some(b) = bias {
            self.check(b)?;
            v = ops::add_row(&v, self.value(b), 1.0)?;
        }
        Ok(self.push(Op::Linear { x, w, bias }, v))
    }

    pub fn attn_apply(&mut self, probs: NodeId, v: NodeId) -> Result<NodeId> {
        self.check(probs)?;
        self.check(v)?;
        let out = ops::matmul(self.value(probs), self.value(v))?;
        Ok(self.push(Op::AttnApply { probs, v }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, v))
    }

    /// `x + row` (or `x - row` with `sign < 0`) on every row.
    pub fn add_row(&mut self, x: NodeId, row: NodeId, sign: f64) -> Result<NodeId> {
        self.check(x)?;
        self.check(row)?;
        let sign = if sign < 0.0 { -1.0 } else { 1.0 };
        let v = ops::add_row(self.value(x), self.value(row), sign)?;
        Ok(self.push(Op::AddRow { x, row, sign }, v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let v = ops::scale(self.value(x), c);
        Ok(self.push(Op::Scale { x, c }, v))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (v, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            },
            v,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = ops::gelu(self.value(x));
        Ok(self.push(Op::Gelu { x }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = ops::relu(self.value(x));
        Ok(self.push(Op::Relu { x }, v))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = ops::softmax_rows(self.value(x))?;
        Ok(self.push(Op::Softmax { x }, v))
    }

    /// Splits a `[C×H×W]` image into `[P × C·patch²]` rows; see
    /// [`crate::vit::patchify`] for the ordering.
    pub fn patchify(&mut self, image: NodeId, patch: usize) -> Result<NodeId> {
        self.check(image)?;
        let v = crate::vit::patchify(self.value(image), patch)?;
        Ok(self.push(Op::Patchify { image, patch }, v))
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_dtype(tb, "concat_rows")?;
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ca != cb {
            return Err(Error::Dimension(format!(
                "concat_rows: {ca} vs {cb} columns"
            )));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let v = Tensor::from_raw(vec![ra + rb, ca], data, ta.dtype());
        Ok(self.push(Op::ConcatRows { a, b }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]);
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            t.same_dtype(first, "concat_cols")?;
            let (r, c) = t.dims2()?;
            if r != rows {
                return Err(Error::Dimension(format!("concat_cols: {r} vs {rows} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_raw(vec![rows, total], data, first.dtype());
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            v,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let v = Tensor::from_raw(vec![rows, len], data, t.dtype());
        Ok(self.push(Op::SliceCols { x, start, len }, v))
    }

    /// Row `row` of a matrix as a `[1×N]` matrix.
    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        let (rows, cols) = t.dims2()?;
        if row >= rows {
            return Err(Error::Usage(format!("row {row} out of range for {rows} rows")));
        }
        let v = Tensor::from_raw(vec![1, cols], t.row(row).to_vec(), t.dtype());
        Ok(self.push(Op::SelectRow { x, row }, v))
    }

    /// `sum(x²)` as a `[1×1]` tensor.
    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        let sq = ops::mul(t, t)?;
        let v = Tensor::from_raw(vec![1, 1], vec![sq.sum()], t.dtype());
        Ok(self.push(Op::SumSquares { x }, v))
    }

    /// `sum(|x|)` as a `[1×1]` tensor.
    pub fn sum_abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let t = self.value(x);
        let v = Tensor::from_raw(vec![1, 1], vec![t.map(f64::abs).sum()], t.dtype());
        Ok(self.push(Op::SumAbs { x }, v))
    }

    /// Backpropagates `seed` from the most recent node.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        let out = self
            .last()
            .ok_or_else(|| Error::Usage("backward on an empty tape".into()))?;
        self.backward_from(out, seed)
    }

    /// Vector-Jacobian product `seedᵀ · ∂output/∂node` for every node the
    /// output depends on.
    pub fn backward_from(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        self.check(output)?;
        let out_val = self.value(output);
        if seed.shape() != out_val.shape() {
            return Err(Error::Dimension(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_val.shape()
            )));
        }
        out_val.same_dtype(seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.vjp(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => ops::add(&acc, &contrib)?,
                    None => contrib,
                });
            }
            grads[idx] = Some(g);
        }
        let leaves: Vec<NodeId> = self.nodes[..=output.0]
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect();
        for &leaf in &leaves {
            if grads[leaf.0].is_none() {
                let v = self.value(leaf);
                grads[leaf.0] = Some(Tensor::zeros(v.shape().to_vec(), v.dtype()));
            }
        }
        Ok(Gradients { grads, leaves })
    }

    pub(crate) fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        use Op::*;
        let val = |id: NodeId| self.value(id);
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Leaf => {}
            MatMul { a, b } | AttnApply { probs: a, v: b } => {
                if needs(*a) {
                    out.push((*a, ops::matmul_nt(g, val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, ops::matmul_tn(val(*a), g)?));
                }
            }
            MatMulNt { a, b } => {
                if needs(*a) {
                    out.push((*a, ops::matmul(g, val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, ops::matmul_tn(g, val(*a))?));
                }
            }
            Linear { x, w, bias } => {
                if needs(*x) {
                    out.push((*x, ops::matmul(g, val(*w))?));
                }
                if needs(*w) {
                    out.push((*w, ops::matmul_tn(g, val(*x))?));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let s = ops::sum_rows(g)?;
                        out.push((*b, s.reshape(val(*b).shape().to_vec())?));
                    }
                }
            }
            Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, ops::scale(g, -1.0)));
            }
            AddRow { x, row, sign } => {
                out.push((*x, g.clone()));
                if needs(*row) {
                    let s = ops::scale(&ops::sum_rows(g)?, *sign);
                    out.push((*row, s.reshape(val(*row).shape().to_vec())?));
                }
            }
            Scale { x, c } => out.push((*x, ops::scale(g, *c))),
            LayerNorm {
                x,
                gamma,
                beta,
                stats,
                ..
            } => {
                let xt = val(*x);
                let gm = val(*gamma);
                let d = *xt.shape().last().unwrap_or(&1);
                let rows = xt.numel() / d.max(1);
                let dtype = xt.dtype();
                let mut dx = vec![0.0; xt.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                    let xr = &xt.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = xr.iter().map(|&v| dtype.round((v - mu) * rs)).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(gm.data())
                        .map(|(&a, &b)| dtype.round(a * b))
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = dtype
                            .round(rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                out.push((*x, Tensor::from_raw(xt.shape().to_vec(), dx, dtype)));
                if needs(*gamma) {
                    let v: Vec<f64> = dgamma.into_iter().map(|v| dtype.round(v)).collect();
                    out.push((*gamma, Tensor::from_raw(gm.shape().to_vec(), v, dtype)));
                }
                if needs(*beta) {
                    let v: Vec<f64> = dbeta.into_iter().map(|v| dtype.round(v)).collect();
                    out.push((*beta, Tensor::from_raw(val(*beta).shape().to_vec(), v, dtype)));
                }
            }
            Gelu { x } => out.push((*x, ops::mul(g, &ops::gelu_grad(val(*x)))?)),
            Relu { x } => {
                let mask = val(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                out.push((*x, ops::mul(g, &mask)?));
            }
            Softmax { x } => {
                let s = &node.value;
                let (m, n) = s.dims2()?;
                let dtype = s.dtype();
                let mut dx = Vec::with_capacity(m * n);
                for i in 0..m {
                    let sr = s.row(i);
                    let gr = g.row(i);
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(sr.iter().zip(gr).map(|(&si, &gi)| dtype.round(si * (gi - dot))));
                }
                out.push((*x, Tensor::from_raw(vec![m, n], dx, dtype)));
            }
            Patchify { image, patch } => {
                let img = val(*image);
                out.push((*image, crate::vit::unpatchify(g, img.shape(), *patch)?));
            }
            ConcatRows { a, b } => {
                let (ra, c) = val(*a).dims2()?;
                let (rb, _) = val(*b).dims2()?;
                let gd = g.data();
                out.push((
                    *a,
                    Tensor::from_raw(vec![ra, c], gd[..ra * c].to_vec(), g.dtype()),
                ));
                out.push((
                    *b,
                    Tensor::from_raw(vec![rb, c], gd[ra * c..].to_vec(), g.dtype()),
                ));
            }
            ConcatCols { parts } => {
                let (rows, _) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.row(i)[start..start + w]);
                    }
                    out.push((p, Tensor::from_raw(vec![rows, w], data, g.dtype())));
                    start += w;
                }
            }
            SliceCols { x, start, len } => {
                let (rows, cols) = val(*x).dims2()?;
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    data[i * cols + start..i * cols + start + len].copy_from_slice(g.row(i));
                }
                out.push((*x, Tensor::from_raw(vec![rows, cols], data, g.dtype())));
            }
            SelectRow { x, row } => {
                let (rows, cols) = val(*x).dims2()?;
                let mut data = vec![0.0; rows * cols];
                data[row * cols..(row + 1) * cols].copy_from_slice(g.data());
                out.push((*x, Tensor::from_raw(vec![rows, cols], data, g.dtype())));
            }
            SumSquares { x } => {
                let gv = g.item()?;
                out.push((*x, val(*x).map(|v| 2.0 * v * gv)));
            }
            SumAbs { x } => {
                let gv = g.item()?;
                let sign = |v: f64| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                out.push((*x, val(*x).map(|v| sign(v) * gv)));
            }
        }
        Ok(out)
    }

    /// Re-evaluates every recorded primitive from the leaf values and returns
    /// the recomputed node values in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut t = Tape::new();
        for node in &self.nodes {
            let id = match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        t.input(node.value.clone())
                    } else {
                        t.constant(node.value.clone())
                    }
                }
                Op::MatMul { a, b } => t.matmul(*a, *b)?,
                Op::MatMulNt { a, b } => t.matmul_nt(*a, *b)?,
                Op::Linear { x, w, bias } => t.linear(*x, *w, *bias)?,
                Op::AttnApply { probs, v } => t.attn_apply(*probs, *v)?,
                Op::Add { a, b } => t.add(*a, *b)?,
                Op::Sub { a, b } => t.sub(*a, *b)?,
                Op::AddRow { x, row, sign } => t.add_row(*x, *row, *sign)?,
                Op::Scale { x, c } => t.scale(*x, *c)?,
                Op::LayerNorm {
                    x, gamma, beta, eps, ..
                } => t.layer_norm(*x, *gamma, *beta, *eps)?,
                Op::Gelu { x } => t.gelu(*x)?,
                Op::Relu { x } => t.relu(*x)?,
                Op::Softmax { x } => t.softmax_rows(*x)?,
                Op::Patchify { image, patch } => t.patchify(*image, *patch)?,
                Op::ConcatRows { a, b } => t.concat_rows(*a, *b)?,
                Op::ConcatCols { parts } => t.concat_cols(parts)?,
                Op::SliceCols { x, start, len } => t.slice_cols(*x, *start, *len)?,
                Op::SelectRow { x, row } => t.select_row(*x, *row)?,
                Op::SumSquares { x } => t.sum_squares(*x)?,
                Op::SumAbs { x } => t.sum_abs(*x)?,
            };
            vals.push(t.value(id).clone());
        }
        Ok(vals)
    }
}
